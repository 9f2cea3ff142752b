//! Acceptance suite: one PASS/FAIL line per criterion, in order. Criterion 12 is
//! qualitative and never fails the run. Oracles that the library could share a
//! bug with (block operator, NTK Gram, QP optimum) are rebuilt here from scratch.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use kdlab::data::{synth_sphere, Dataset};
use kdlab::embed::{
    alignf, alignment_qp, center_kernel, centered_alignment, combine, gaussian_bank, nystrom_embed,
    qp_objective, AlignfOptions,
};
use kdlab::experiments::{
    kernel_family, run_distill_suite, run_theorem2, theorem1_checks, theorem3_checks,
    two_stage_sweep, width_means, ExperimentConfig, KernelFamily, Recipe, Setting,
};
use kdlab::flow::{grad_hidden_weights, kd_loss, simulate_flow_rk4, DistillConfig, Regularization};
use kdlab::model::{
    forward, hidden_features, init_network, ActivationKind, PrivilegedKnowledge, TwoLayerNet,
};
use kdlab::spectral::{
    bisection_poles, cross_validate_poles, decompose, linearized_trajectory, resolvent_eigvecs,
    t_null_vector, EigenRoute, GramStack, KernelSolution,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// `Σ_k c_k² H_k` with `H_k[i, j] = σ′(w_k·x_i) σ′(w_k·x_j) ⟨x_i, x_j⟩`, straight from the weights.
fn ntk_gram(net: &TwoLayerNet, ds: &Dataset) -> DMatrix<f64> {
    let (n, m) = (ds.len(), net.width());
    let mut h = DMatrix::zeros(n, n);
    for k in 0..m {
        let c2 = net.output[k] * net.output[k] / m as f64;
        let w = net.hidden.row(k);
        let d: Vec<f64> = (0..n)
            .map(|i| net.activation.derivative(w.dot(&ds.features.row(i))))
            .collect();
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] += c2 * d[i] * d[j] * ds.features.row(i).dot(&ds.features.row(j));
            }
        }
    }
    h
}

/// Dense block operator, block (k, l) = `H_k (c_k c_l + λ δ_kl)`.
fn dense_block(stack: &GramStack, lambda: f64) -> DMatrix<f64> {
    let (n, m) = (stack.samples(), stack.width());
    let mut out = DMatrix::zeros(n * m, n * m);
    for k in 0..m {
        for l in 0..m {
            let scale = stack.coeffs[k] * stack.coeffs[l] + if k == l { lambda } else { 0.0 };
            out.view_mut((k * n, l * n), (n, n))
                .copy_from(&(&stack.per_unit[k] * scale));
        }
    }
    out
}

/// Small random instances for the pole criteria: n in 2..=4, m in 3..=6, λ in {0.1, 1}.
fn pole_instances() -> Vec<(GramStack, f64, String)> {
    (0..5u64)
        .map(|i| {
            let n = 2 + (i as usize % 3);
            let m = 3 + (i as usize * 2 % 4);
            let lambda = if i % 2 == 0 { 0.1 } else { 1.0 };
            let seed = 100 + i;
            let ds = synth_sphere(n, 5, seed).unwrap();
            let net = init_network(m, 5, 1.0, seed, ActivationKind::Tanh).unwrap();
            let stack = GramStack::from_network(&net, &ds, Regularization::Finite(lambda)).unwrap();
            (stack, lambda, format!("n={n} m={m} λ={lambda}"))
        })
        .collect()
}

fn sorted_real_eigenvalues(a: &DMatrix<f64>) -> (Vec<f64>, f64) {
    let eig = a.clone().complex_eigenvalues();
    let max_imag = eig.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let mut re: Vec<f64> = eig.iter().map(|z| z.re).collect();
    re.sort_by(f64::total_cmp);
    (re, max_imag)
}

fn family_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(Recipe::Theorem1);
    cfg.seeds = vec![1, 2, 3, 4, 5];
    cfg.resolve().unwrap();
    cfg
}

fn criterion_1(cfg: &ExperimentConfig, family: &KernelFamily, elapsed: Duration) -> Outcome {
    let (checks, _, _) = theorem1_checks(cfg, family);
    let gap = checks
        .iter()
        .filter(|c| c.name.starts_with("theorem1.gap"))
        .collect::<Vec<_>>();
    let means = width_means(&family.cells, 0.5, |c| c.relative_gap);
    let fast = elapsed < Duration::from_secs(120);
    outcome(
        gap.iter().all(|c| c.passed) && gap.len() == 2 && fast,
        format!(
            "seed-mean ‖f(T)−f∞‖/‖f(0)−f∞‖ {}; decreasing={} ; {:.1}s for the shared family (limit 120s)",
            means.iter().map(|(w, v)| format!("m={w}: {v:.2e}")).collect::<Vec<_>>().join(", "),
            gap[0].passed,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2(cfg: &ExperimentConfig, family: &KernelFamily, elapsed: Duration) -> Outcome {
    let (checks, _, _) = theorem3_checks(cfg, family);
    let end = checks
        .iter()
        .find(|c| c.name.ends_with("_end_to_end"))
        .expect("end-to-end check");
    let g = width_means(&family.cells, 0.5, |c| c.l1_modal_gap);
    let ratio = g[2].1 / g[0].1;
    let fast = elapsed < Duration::from_secs(300);
    outcome(
        ratio < 0.5 && end.passed && fast,
        format!(
            "seed-mean G: {}; G(256)/G(16) = {ratio:.3e} (< 0.5); {:.1}s (limit 300s)",
            g.iter()
                .map(|(w, v)| format!("m={w}: {v:.3e}"))
                .collect::<Vec<_>>()
                .join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut worst_min_eig: f64 = 0.0;
    let mut worst_match: f64 = 0.0;
    let mut excluded = 0;
    let mut ok = true;
    let mut notes = Vec::new();
    for (stack, lambda, label) in pole_instances() {
        let (poles, imag) = sorted_real_eigenvalues(&dense_block(&stack, lambda));
        ok &= imag < 1e-9;
        let checks = cross_validate_poles(&stack, &poles, 1e-8).unwrap();
        for c in &checks {
            if c.excluded {
                excluded += 1;
            } else {
                worst_min_eig = worst_min_eig.max(c.min_abs_eigenvalue);
            }
        }
        let positive: Vec<f64> = poles.iter().copied().filter(|&p| p > 1e-9).collect();
        let roots = bisection_poles(
            &stack,
            0.5 * positive[0],
            2.0 * positive[positive.len() - 1],
            20_000,
        )
        .unwrap();
        if roots.len() != positive.len() {
            ok = false;
            notes.push(format!(
                "{label}: {} roots for {} poles",
                roots.len(),
                positive.len()
            ));
            continue;
        }
        for (r, p) in roots.iter().zip(&positive) {
            worst_match = worst_match.max((r - p).abs() / p.max(1.0));
        }
    }
    ok &= worst_min_eig < 1e-6 && worst_match < 1e-6;
    outcome(
        ok,
        format!(
            "max min|eig(I+T(−p))| = {worst_min_eig:.2e}, max bisection mismatch = {worst_match:.2e}, excluded coincidences = {excluded} {}",
            notes.join("; ")
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut worst_res: f64 = 0.0;
    let mut worst_bi: f64 = 0.0;
    let mut worst_exp: f64 = 0.0;
    let mut ok = true;
    for (i, (stack, lambda, _)) in pole_instances().into_iter().enumerate() {
        let dense = dense_block(&stack, lambda);
        let dec = decompose(&stack, EigenRoute::Auto).unwrap();
        // eigenvectors built from the −1 null vectors of T(−p)
        let mut rights = Vec::new();
        let mut lefts = Vec::new();
        for &p in dec.poles.iter() {
            let (v, _) = t_null_vector(&stack, p).unwrap();
            match resolvent_eigvecs(&stack, p, &v, &v) {
                Ok((r, l)) => {
                    worst_res =
                        worst_res.max((&dense * &r - &r * p).norm() / (r.norm() * p.max(1.0)));
                    worst_res = worst_res
                        .max((dense.transpose() * &l - &l * p).norm() / (l.norm() * p.max(1.0)));
                    rights.push(r);
                    lefts.push(l);
                }
                Err(_) => ok = false,
            }
        }
        for (a, l) in lefts.iter().enumerate() {
            for (b, r) in rights.iter().enumerate() {
                let target = if a == b { 1.0 } else { 0.0 };
                worst_bi = worst_bi.max((l.dot(r) - target).abs());
            }
        }
        worst_res = worst_res.max(dec.residuals.worst_relative());
        // modal exponential against nalgebra's Padé scaling-and-squaring
        let eta0 = DVector::from_fn(stack.total_dim(), |j, _| {
            ((j * 7 + i * 3) % 11) as f64 / 11.0 - 0.5
        });
        let p_min = dec
            .poles
            .iter()
            .copied()
            .filter(|&p| p > 1e-9)
            .fold(f64::INFINITY, f64::min);
        let times: Vec<f64> = (0..10).map(|t| t as f64 * 0.5 / p_min).collect();
        let lin = linearized_trajectory(&stack, &dec, &eta0, &times).unwrap();
        ok &= !lin.dense_fallback;
        for (t, eta) in times.iter().zip(&lin.etas) {
            let oracle = (&dense * (-t)).exp() * &eta0;
            worst_exp = worst_exp.max((eta - oracle).amax() / eta0.amax());
        }
    }
    ok &= worst_res < 1e-8 && worst_bi < 1e-8 && worst_exp < 1e-6;
    outcome(
        ok,
        format!("max eigen-residual {worst_res:.2e}, max |⟨l_i,r_j⟩−δ_ij| {worst_bi:.2e}, max modal-vs-expm {worst_exp:.2e}"),
    )
}

fn criterion_5() -> Outcome {
    let mut worst_traj: f64 = 0.0;
    let mut worst_pole: f64 = 0.0;
    let cfg = family_config();
    for (seed, width) in [(1u64, 16usize), (2, 64), (3, 5)] {
        let (ds, _) = cfg.dataset().load(seed).unwrap();
        let net = init_network(
            width,
            ds.dim(),
            cfg.weight_scale(),
            seed,
            ActivationKind::Tanh,
        )
        .unwrap();
        let pk = PrivilegedKnowledge::from_network(&net, &ds).unwrap();
        let sol = KernelSolution::new(
            &net,
            &ds,
            &pk,
            Regularization::Finite(0.0),
            EigenRoute::Auto,
        )
        .unwrap();
        let h = ntk_gram(&net, &ds);
        let eig = h.clone().symmetric_eigen();
        let y = &ds.labels;
        let f0 = forward(&net, &ds).unwrap();
        let coeffs = eig.eigenvectors.transpose() * (&f0 - y);
        let p_min = eig.eigenvalues.min();
        for t in (0..10).map(|i| i as f64 / p_min) {
            let decay =
                DVector::from_fn(ds.len(), |i, _| (-eig.eigenvalues[i] * t).exp() * coeffs[i]);
            let ntk = y + &eig.eigenvectors * decay;
            worst_traj = worst_traj.max((sol.output(t) - ntk).amax());
        }
        let mut expect: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        expect.sort_by(f64::total_cmp);
        let poles = sol.decomposition.poles.as_slice();
        let top = &poles[poles.len() - expect.len()..];
        for (p, e) in top.iter().zip(&expect) {
            worst_pole = worst_pole.max((p - e).abs());
        }
        let zeros = &poles[..poles.len() - expect.len()];
        worst_pole = worst_pole.max(zeros.iter().map(|p| p.abs()).fold(0.0, f64::max));
    }
    outcome(
        worst_traj < 1e-8 && worst_pole < 1e-8,
        format!("max |f_lin − (y + e^(−Ht)(f(0)−y))| = {worst_traj:.2e}, max |pole − eig(H)| = {worst_pole:.2e}"),
    )
}

fn criterion_6() -> Outcome {
    let mut cfg = ExperimentConfig::new(Recipe::Theorem2);
    cfg.seeds = vec![1, 2, 3, 4, 5];
    let start = Instant::now();
    let out = run_theorem2(&{
        cfg.resolve().unwrap();
        cfg.clone()
    })
    .unwrap();
    let elapsed = start.elapsed();
    let hard: Vec<_> = out.report.checks.iter().filter(|c| c.hard).collect();
    let gaps: Vec<String> = hard
        .iter()
        .map(|c| {
            format!(
                "{} = {:.3}",
                c.name.trim_start_matches("theorem2."),
                c.value
            )
        })
        .collect();
    let teachers_ok = out
        .cells
        .iter()
        .all(|c| c.report["teacher_loss"].as_f64().unwrap() < 1e-6);
    outcome(
        hard.iter().all(|c| c.passed)
            && hard.len() == 4
            && teachers_ok
            && elapsed < Duration::from_secs(600),
        format!(
            "{}; teachers < 1e-6: {teachers_ok}; {:.1}s (limit 600s)",
            gaps.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7(family: &KernelFamily) -> Outcome {
    let at64: Vec<_> = family.cells.iter().filter(|c| c.width == 64).collect();
    let bounds = at64.iter().all(|c| {
        c.drift
            .as_ref()
            .is_some_and(|d| d.unit_bound_holds && d.block_bound_holds)
    });
    let worst_unit = at64
        .iter()
        .filter_map(|c| c.drift.as_ref())
        .map(|d| d.max_unit_bound_ratio)
        .fold(0.0, f64::max);
    let worst_block = at64
        .iter()
        .filter_map(|c| c.drift.as_ref())
        .map(|d| d.max_block_bound_ratio)
        .fold(0.0, f64::max);
    let q = width_means(&family.cells, 0.5, |c| {
        c.drift.as_ref().map_or(f64::NAN, |d| d.sup_q)
    });
    let decreasing = q.windows(2).all(|w| w[1].1 < w[0].1);
    outcome(
        bounds && decreasing && !at64.is_empty(),
        format!(
            "m=64, {} seeds: bounds hold at every record = {bounds} (max measured/bound unit {worst_unit:.3}, block {worst_block:.3}); seed-mean sup q: {}",
            at64.len(),
            q.iter().map(|(w, v)| format!("m={w}: {v:.2}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn criterion_8() -> Outcome {
    let sweep = two_stage_sweep(10_000, 8).unwrap();
    outcome(
        sweep.violations == 0 && sweep.samples == 10_000,
        format!(
            "{} samples, {} violations, min S₂−S₁ = {:.2e}",
            sweep.samples, sweep.violations, sweep.min_margin
        ),
    )
}

/// Exact minimizer of `vᵀMv − 2vᵀa` over v ≥ 0 by enumerating supports.
fn qp_oracle(m: &DMatrix<f64>, a: &DVector<f64>) -> f64 {
    let p = a.len();
    let mut best = 0.0; // v = 0
    for mask in 1u32..(1 << p) {
        let s: Vec<usize> = (0..p).filter(|&i| mask & (1 << i) != 0).collect();
        let ms = DMatrix::from_fn(s.len(), s.len(), |i, j| m[(s[i], s[j])]);
        let as_ = DVector::from_fn(s.len(), |i, _| a[s[i]]);
        let Some(vs) = ms.lu().solve(&as_) else {
            continue;
        };
        if vs.iter().any(|&x| x < 0.0) {
            continue;
        }
        let mut v = DVector::zeros(p);
        for (i, &k) in s.iter().enumerate() {
            v[k] = vs[i];
        }
        best = f64::min(best, qp_objective(m, a, &v));
    }
    best
}

/// Coarse grid over the simplex directions, scaled optimally along each ray.
fn qp_grid(m: &DMatrix<f64>, a: &DVector<f64>, steps: usize) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let u =
                DVector::from_vec(vec![i as f64, j as f64, (steps - i - j) as f64]) / steps as f64;
            let quad = u.dot(&(m * &u));
            let lin = u.dot(a);
            if quad > 0.0 && lin > 0.0 {
                best = best.min(-lin * lin / quad);
            }
        }
    }
    best
}

fn criterion_9() -> Outcome {
    let mut worst_obj: f64 = 0.0;
    let mut worst_align: f64 = 0.0;
    let mut grid_ok = true;
    for seed in 0..5u64 {
        let ds = synth_sphere(8, 4, 40 + seed).unwrap();
        let widths = [0.3 + 0.1 * seed as f64, 1.0, 3.0 + seed as f64];
        let bank = gaussian_bank(&ds, &widths).unwrap();
        let (m, a) = alignment_qp(&bank, &ds.labels).unwrap();
        let w = alignf(&bank, &ds.labels, AlignfOptions::default()).unwrap();
        let oracle = qp_oracle(&m, &a);
        worst_obj = worst_obj.max((w.objective - oracle).abs() / oracle.abs().max(1.0));
        grid_ok &= qp_grid(&m, &a, 200) >= oracle - 1e-9;
        let combined = centered_alignment(&combine(&bank, &w.mu).unwrap(), &ds.labels);
        for k in &bank.kernels {
            worst_align = worst_align.max(centered_alignment(k, &ds.labels) - combined);
        }
        // the centering used by the QP matches the direct definition
        let kc = center_kernel(&bank.kernels[0]);
        let yy = &ds.labels * ds.labels.transpose();
        grid_ok &= (a[0] - kc.dot(&yy)).abs() < 1e-10 * a[0].abs().max(1.0);
    }
    outcome(
        worst_obj < 1e-6 && worst_align <= 1e-6 && grid_ok,
        format!("max |objective − support-enumeration optimum| {worst_obj:.2e}, grid never beats oracle: {grid_ok}, max single-minus-combined alignment {worst_align:.2e}"),
    )
}

fn criterion_10() -> Outcome {
    let ds = synth_sphere(12, 4, 77).unwrap();
    let bank = gaussian_bank(&ds, &[0.5, 1.5]).unwrap();
    let k = combine(&bank, &DVector::from_vec(vec![0.6, 0.8])).unwrap();
    let (phi, _) = nystrom_embed(&k, 12, 3).unwrap();
    let exact = (&phi * phi.transpose() - &k).amax();
    let errors: Vec<f64> = (1..=12)
        .map(|r| {
            let (phi, _) = nystrom_embed(&k, r, 3).unwrap();
            (&phi * phi.transpose() - &k).norm()
        })
        .collect();
    let monotone = errors.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    outcome(
        exact < 1e-8 && monotone,
        format!("r=n max error {exact:.2e}; Frobenius error non-increasing over r=1..12: {monotone} (r=1: {:.3e}, r=6: {:.3e})", errors[0], errors[5]),
    )
}

fn criterion_11() -> Outcome {
    let ds = synth_sphere(5, 3, 9).unwrap();
    let net = init_network(7, 3, 1.0, 9, ActivationKind::Tanh).unwrap();
    let teacher = init_network(7, 3, 1.0, 10, ActivationKind::Tanh).unwrap();
    let pk = PrivilegedKnowledge::new(
        hidden_features(&teacher, &ds).unwrap(),
        kdlab::model::KnowledgeSource::External,
    )
    .unwrap();
    let cfg = DistillConfig::default().with_lambda(0.5);

    // gradient: flow field = −½ ∇loss, against central differences
    let v = grad_hidden_weights(&net, &ds, &pk, &cfg).unwrap();
    let h = 1e-6;
    let mut fd = DMatrix::zeros(v.nrows(), v.ncols());
    for k in 0..v.nrows() {
        for j in 0..v.ncols() {
            let mut plus = net.clone();
            plus.hidden[(k, j)] += h;
            let mut minus = net.clone();
            minus.hidden[(k, j)] -= h;
            let diff = kd_loss(&plus, &ds, &pk, &cfg).unwrap().total
                - kd_loss(&minus, &ds, &pk, &cfg).unwrap().total;
            fd[(k, j)] = -0.5 * diff / (2.0 * h);
        }
    }
    let grad_err = (&v - &fd).norm() / v.norm();

    // RK4 order: endpoint error against a fine reference
    let run = |dt: f64| {
        let c = DistillConfig {
            dt,
            horizon: 2.0,
            record_every: 1_000_000,
            record_weights: true,
            ..cfg.clone()
        };
        simulate_flow_rk4(&net, &ds, &pk, &c, None)
            .unwrap()
            .weights
            .unwrap()
            .last()
            .unwrap()
            .clone()
    };
    let reference = run(0.2 / 64.0);
    let e1 = (run(0.2) - &reference).norm();
    let e2 = (run(0.1) - &reference).norm();
    let order = (e1 / e2).log2();

    // output identity and monotone objective on a long run
    let c = DistillConfig {
        dt: 0.05,
        horizon: 20.0,
        record_every: 1,
        record_units: true,
        ..cfg.clone()
    };
    let traj = simulate_flow_rk4(&net, &ds, &pk, &c, None).unwrap();
    let units = traj.unit_outputs.as_ref().unwrap();
    let m = net.width() as f64;
    let identity = traj
        .outputs
        .iter()
        .zip(units)
        .map(|(f, u)| {
            let sum = DVector::from_fn(f.len(), |i, _| {
                (0..net.width())
                    .map(|k| net.output[k] * u[(k, i)])
                    .sum::<f64>()
                    / m.sqrt()
            });
            (f - sum).amax()
        })
        .fold(0.0, f64::max);
    let increases = traj.objective.windows(2).filter(|w| w[1] > w[0]).count();
    outcome(
        grad_err < 1e-5 && (3.5..4.5).contains(&order) && identity < 1e-10 && increases == 0,
        format!(
            "gradient rel. error {grad_err:.2e}; RK4 observed order {order:.3} (errors {e1:.2e} → {e2:.2e}); output identity {identity:.2e} over {} records; objective increases: {increases}",
            traj.len()
        ),
    )
}

fn criterion_12() -> Outcome {
    let mut cfg = ExperimentConfig::new(Recipe::DistillSuite);
    cfg.seeds = vec![1, 2, 3];
    cfg.resolve().unwrap();
    let out = run_distill_suite(&cfg, &Setting::SUITE).unwrap();
    let beats: Vec<_> = out
        .report
        .checks
        .iter()
        .filter(|c| c.name.starts_with("distill.beats_no_teacher"))
        .collect();
    let wins = beats.iter().filter(|c| c.passed).count();
    let constant = out
        .report
        .checks
        .iter()
        .filter(|c| c.name.starts_with("pure_distill.constant_outputs"))
        .all(|c| c.passed);
    outcome(
        wins == 3 && constant,
        format!(
            "distilled ≤ no-teacher final train loss on {wins}/3 seeds [{}]; pure distillation constant: {constant}",
            beats.iter().map(|c| c.detail.clone()).collect::<Vec<_>>().join("; ")
        ),
    )
}

#[test]
fn acceptance() {
    let mut failures = Vec::new();
    let mut report = |id: usize, name: &str, hard: bool, o: Outcome| {
        let verdict = match (o.passed, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "SOFT-FAIL",
        };
        // straight to stderr: the verdict lines should show even when the test passes
        let _ = writeln!(
            std::io::stderr(),
            "criterion {id:>2} {verdict} {name}: {}",
            o.detail
        );
        if hard && !o.passed {
            failures.push(id);
        }
    };

    let cfg = family_config();
    let start = Instant::now();
    let family = kernel_family(&cfg).unwrap();
    let elapsed = start.elapsed();

    report(
        1,
        "final value and convergence in width",
        true,
        criterion_1(&cfg, &family, elapsed),
    );
    report(
        2,
        "modal expansion gap",
        true,
        criterion_2(&cfg, &family, elapsed),
    );
    report(3, "pole cross-validation", true, criterion_3());
    report(
        4,
        "resolvent eigenvectors and modal exponential",
        true,
        criterion_4(),
    );
    report(5, "lambda=0 kernel reduction", true, criterion_5());
    report(6, "subsampled-teacher variance law", true, criterion_6());
    report(7, "kernel drift bounds", true, criterion_7(&family));
    report(8, "two-stage inequality", true, criterion_8());
    report(9, "alignf QP", true, criterion_9());
    report(10, "Nystrom reconstruction", true, criterion_10());
    report(11, "simulator self-consistency", true, criterion_11());
    report(12, "qualitative orderings (soft)", false, criterion_12());

    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
