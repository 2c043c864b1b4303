//! Acceptance gate: one test per advertised guarantee, each ending in a
//! single PASS line with the measured numbers. Tolerances are fixed here,
//! not tuned to runs.

use condwave::cli::{run, Command};
use condwave::conditional::{
    accumulate_gauge, build_series, cond_schrodinger_residual, fit_gauge, gamma_conditional,
    normalization_series, normalize_1d, propagate_reference, pseudo_schrodinger_residual,
    tilde_wavefunction, ConditionalMachine, PseudoOptions,
};
use condwave::config::{parse_config_str, ExperimentConfig};
use condwave::dynamics::{integrate_flow, GridFlow, StateFields, VelocityModel};
use condwave::experiments::{
    conditional_classical_trajectory, matched_classical_trajectory, run_classicality_on,
    run_equivariance_on, run_velocity_comparison_on, CLASSICAL_SCALE_THRESHOLD,
};
use condwave::stationary::{analytic_state_check, Scenario, ScenarioKind};
use std::f64::consts::TAU;
use std::sync::OnceLock;

/// The coupled scenario needs a real eigensolve; share one instance across
/// the criteria that use it.
fn coupled() -> &'static Scenario {
    static COUPLED: OnceLock<Scenario> = OnceLock::new();
    COUPLED.get_or_init(|| {
        Scenario::build(ScenarioKind::CoupledHeavyEnv, (129, 256), 7).expect("coupled eigensolve")
    })
}

fn desk_cfg(kind: ScenarioKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_for(kind);
    cfg.t_final = TAU;
    cfg.dt = 1e-3;
    cfg.dt_slice = 2e-2;
    cfg.seed = 7;
    cfg
}

#[test]
fn criterion_1_eigenstate_fidelity() {
    // closed-form scenarios solve their eigenproblem to machine precision
    let mut analytic_worst = 0.0_f64;
    for kind in [
        ScenarioKind::VortexOscillator,
        ScenarioKind::RingPlanewaveEnv,
        ScenarioKind::FrozenGround,
    ] {
        let s = Scenario::build_default(kind, 7).unwrap();
        let check = analytic_state_check(&s).unwrap();
        assert!(
            check.residual < 1e-8,
            "{}: closed-form residual {:.3e} >= 1e-8",
            kind.name(),
            check.residual
        );
        assert!(check.state_alignment_defect.abs() < 1e-10, "{}", kind.name());
        analytic_worst = analytic_worst.max(check.residual);
    }

    // the numerically solved scenario converged tightly
    let num_res = coupled().state.residual;
    assert!(num_res < 1e-6, "coupled eigensolve residual {num_res:.3e} >= 1e-6");

    // vortex energy: 2 hbar omega within 1e-3 relative at desk resolution,
    // improving ~4x per grid refinement
    let e_desk = Scenario::build(ScenarioKind::VortexOscillator, (257, 257), 7).unwrap();
    let e_fine = Scenario::build(ScenarioKind::VortexOscillator, (513, 513), 7).unwrap();
    let err_desk = (e_desk.state.energy - 2.0).abs() / 2.0;
    let err_fine = (e_fine.state.energy - 2.0).abs() / 2.0;
    assert!(err_desk < 1e-3, "vortex energy error {err_desk:.3e} >= 1e-3");
    assert!(
        err_desk / err_fine > 3.5,
        "refinement gain {:.2} < 3.5",
        err_desk / err_fine
    );

    println!(
        "criterion 1 (eigenstate fidelity): PASS — analytic residual {:.2e}, numeric residual {:.2e}, vortex energy error {:.2e} improving {:.2}x",
        analytic_worst, num_res, err_desk, err_desk / err_fine
    );
}

#[test]
fn criterion_2_equivariance_of_all_velocity_models() {
    let mut cfg = desk_cfg(ScenarioKind::VortexOscillator);
    cfg.grid = (257, 257);
    cfg.n_ensemble = 10_000;
    // default model set: bohmian, scaled {-1, 0.5, 2}, stream default
    assert_eq!(cfg.velocity_models.len(), 5);
    let scenario = Scenario::build(cfg.scenario, cfg.grid, cfg.seed).unwrap();
    let report = run_equivariance_on(&scenario, &cfg).unwrap();

    let mut lines = Vec::new();
    for m in &report.models {
        let tv_end = *m.tv.last().unwrap();
        // A small fraction of members freezes when it drifts into the
        // masked neighborhood of the vortex core (the 1/r velocity is not
        // representable there). Frozen members keep their |psi|^2-sampled
        // position, so the distribution criterion below is what matters;
        // the cap only guards against wholesale integrator failure.
        assert!(
            (m.frozen_members as f64) < 0.10 * report.n_ensemble as f64,
            "{}: {} of {} members frozen",
            m.model,
            m.frozen_members,
            report.n_ensemble
        );
        assert!(
            tv_end <= report.threshold,
            "{}: TV(t_final) = {:.4} above bootstrap threshold {:.4}",
            m.model,
            tv_end,
            report.threshold
        );
        lines.push(format!("{} {:.4} ({} frozen)", m.model, tv_end, m.frozen_members));
    }
    println!(
        "criterion 2 (equivariance): PASS — threshold {:.4} ({} reseeds), final TV: {}",
        report.threshold,
        condwave::experiments::BOOTSTRAP_RESEEDS,
        lines.join(", ")
    );
}

#[test]
fn criterion_3_exact_identity_refines_and_needs_gamma() {
    let run_pair = |n: usize, dt_slice: f64| {
        let scenario = Scenario::build(ScenarioKind::VortexOscillator, (n, n), 7).unwrap();
        let fields = StateFields::new(&scenario.state.psi, scenario.masses).unwrap();
        let machine = ConditionalMachine::new(&scenario, &fields).unwrap();
        let flow = GridFlow { fields: &fields, model: VelocityModel::Bohmian };
        let traj = integrate_flow(&flow, [1.0, 0.0], 0.0, 3.0, 1e-3, 8).unwrap();
        let series = build_series(&machine, &traj, &[0.4, 0.9, 1.7, 2.3], dt_slice).unwrap();
        let floor = machine.velocity_floor(3.0);
        let energy = scenario.kind.continuum_energy().unwrap();
        let mut with = 0.0_f64;
        let mut without = 0.0_f64;
        for trip in &series.triplets {
            let gamma = gamma_conditional(trip, floor);
            with = with.max(pseudo_schrodinger_residual(
                &machine,
                trip,
                &gamma,
                PseudoOptions { energy, include_gamma: true },
            ));
            without = without.max(pseudo_schrodinger_residual(
                &machine,
                trip,
                &gamma,
                PseudoOptions { energy, include_gamma: false },
            ));
        }
        (with, without)
    };
    // simultaneous halving of grid spacing and slice time step
    let (coarse, coarse_ablate) = run_pair(257, 1e-3);
    let (fine, fine_ablate) = run_pair(513, 5e-4);
    let order = (coarse / fine).log2();
    assert!(order >= 1.8, "refinement order {order:.2} < 1.8 ({coarse:.3e} -> {fine:.3e})");
    assert!(
        fine_ablate > 5.0 * fine,
        "gamma ablation not load-bearing: {fine_ablate:.3e} vs {fine:.3e}"
    );
    assert!(
        coarse_ablate / fine_ablate < 1.6,
        "ablated residual must plateau: {coarse_ablate:.3e} -> {fine_ablate:.3e}"
    );
    println!(
        "criterion 3 (exact identity): PASS — order {:.2}, ablated residual plateaus at {:.2e}",
        order, fine_ablate
    );
}

#[test]
fn criterion_4_conditional_schrodinger_approximation_in_classical_regime() {
    let scenario = coupled();
    let cfg = desk_cfg(ScenarioKind::CoupledHeavyEnv);
    let fields = StateFields::new(&scenario.state.psi, scenario.masses).unwrap();
    let machine = ConditionalMachine::new(scenario, &fields).unwrap();
    let flow = GridFlow { fields: &fields, model: VelocityModel::Bohmian };
    let x0 = scenario.kind.default_x0();
    let traj = integrate_flow(&flow, x0, 0.0, cfg.t_final + 2.0 * cfg.dt, cfg.dt, 14).unwrap();

    let checkpoints = cfg.checkpoints();
    let series = build_series(&machine, &traj, &checkpoints, cfg.dt).unwrap();
    let floor = machine.velocity_floor(cfg.t_final);

    // per-checkpoint residual of the approximate equation
    let mut f_dots = Vec::new();
    let mut gammas = Vec::new();
    let mut worst_r = 0.0_f64;
    for trip in &series.triplets {
        let fit = fit_gauge(&machine, trip);
        let r = cond_schrodinger_residual(&machine, trip, fit.f_dot);
        worst_r = worst_r.max(r);
        f_dots.push(fit.f_dot);
        gammas.push(gamma_conditional(trip, floor).mean);
    }
    assert!(worst_r < 1e-2, "conditional residual max {worst_r:.3e} >= 1e-2");

    // reference propagation under the same time-dependent potential,
    // stepped so snapshots land exactly on the checkpoints
    let slice0 = machine.slice(&traj, 0.0).unwrap();
    let mut psi0 = slice0.psi.clone();
    normalize_1d(&mut psi0, &machine.w1).unwrap();
    let steps_per_check = (cfg.dt_slice / cfg.dt).round() as usize;
    let dt_ref = checkpoints[0] / steps_per_check as f64;
    let ax1 = *scenario.grid.axis(0);
    let ax2 = *scenario.grid.axis(1);
    let reference = propagate_reference(
        &psi0,
        &ax1,
        scenario.masses.m1,
        |t, x| {
            let x2 = traj.position(t).map(|p| p[1]).unwrap_or_else(|_| traj.end()[1]);
            scenario.potential_at(x, ax2.wrap(x2))
        },
        0.0,
        cfg.t_final,
        dt_ref,
        steps_per_check,
    )
    .unwrap();
    assert_eq!(reference.times.len(), checkpoints.len() + 1);

    // gauge-rotate and renormalize the conditional snapshots, then take
    // the direct (not phase-minimized) distance from the propagated state
    let mut times_with_zero = vec![0.0];
    times_with_zero.extend_from_slice(&checkpoints);
    let mut fd = vec![f_dots[0]];
    fd.extend_from_slice(&f_dots);
    let mut rate = vec![gammas[0]];
    rate.extend_from_slice(&gammas);
    let n0 = slice0.norm(&machine.w1).powi(2);
    let gauge = accumulate_gauge(&times_with_zero, &fd);
    let norms = normalization_series(&times_with_zero, &rate, n0);

    let mut dev_final = 0.0;
    for (k, trip) in series.triplets.iter().enumerate() {
        let tilde = tilde_wavefunction(&trip.center, norms[k + 1], gauge[k + 1]);
        let reference_state = &reference.states[k + 1];
        let mut d2 = 0.0;
        for i in 0..tilde.len() {
            d2 += machine.w1[i] * (tilde[i] - reference_state[i]).norm_sqr();
        }
        dev_final = d2.sqrt();
    }
    assert!(
        dev_final < 5e-2,
        "reference-propagator deviation at t_final {dev_final:.3e} >= 5e-2"
    );
    println!(
        "criterion 4 (conditional Schrodinger approximation): PASS — max residual {:.3e}, final deviation {:.3e}",
        worst_r, dev_final
    );
}

#[test]
fn criterion_5_velocity_model_discrimination() {
    let scenario = coupled();
    let mut cfg = desk_cfg(ScenarioKind::CoupledHeavyEnv);
    cfg.lambda_sweep = vec![-1.0, -0.5, -0.25, -0.01, 0.0, 0.01, 0.25, 0.5, 2.0];
    cfg.n_ensemble = 1000;
    let report = run_velocity_comparison_on(scenario, &cfg).unwrap();

    let point = |lambda: f64| {
        report
            .points
            .iter()
            .find(|p| p.lambda == Some(lambda))
            .unwrap_or_else(|| panic!("sweep point {lambda} missing"))
    };

    assert_eq!(point(0.0).deviation_ratio, 1.0);
    let frozen_ratio = point(-1.0).deviation_ratio;
    assert!(frozen_ratio >= 10.0, "frozen-law deviation ratio {frozen_ratio:.2} < 10");
    for lambda in [-0.01, 0.01] {
        let r = point(lambda).deviation_ratio;
        assert!(r <= 1.5, "lambda {lambda}: ratio {r:.3} > 1.5");
    }

    // the deviation ratio grows with |lambda| (groups of equal |lambda| pooled)
    let groups: Vec<(f64, Vec<f64>)> = [
        (0.0, vec![0.0]),
        (0.25, vec![-0.25, 0.25]),
        (0.5, vec![-0.5, 0.5]),
        (1.0, vec![-1.0]),
        (2.0, vec![2.0]),
    ]
    .into_iter()
    .map(|(a, ls)| (a, ls.into_iter().map(|l| point(l).deviation_ratio).collect()))
    .collect();
    let mut means = Vec::new();
    for (abs_l, devs) in &groups {
        means.push((abs_l, devs.iter().sum::<f64>() / devs.len() as f64));
    }
    for w in means.windows(2) {
        assert!(
            w[1].1 >= 0.95 * w[0].1,
            "deviation not monotone in |lambda|: {:.3e} at {} -> {:.3e} at {}",
            w[0].1,
            w[0].0,
            w[1].1,
            w[1].0
        );
    }
    for p in &report.points {
        let finite = p.residual_ratio.is_finite() && p.deviation_ratio.is_finite();
        assert_eq!(p.ratio_flagged, !finite, "flag mismatch for {}", p.model);
    }

    println!(
        "criterion 5 (velocity discrimination): PASS — frozen ratio {:.1}, |lambda|=0.01 ratios ({:.2}, {:.2}), deviations by |lambda| {:?}",
        frozen_ratio,
        point(-0.01).deviation_ratio,
        point(0.01).deviation_ratio,
        means.iter().map(|(_, m)| format!("{m:.3}")).collect::<Vec<_>>()
    );
}

#[test]
fn criterion_6_classical_limit_diagnostics() {
    let mut ring_cfg = desk_cfg(ScenarioKind::RingPlanewaveEnv);
    ring_cfg.velocity_models = vec![VelocityModel::Bohmian];
    let ring = Scenario::build(ring_cfg.scenario, ring_cfg.grid, ring_cfg.seed).unwrap();
    let ring_report = run_classicality_on(&ring, &ring_cfg).unwrap();
    let rm = &ring_report.metrics[0];
    assert!(rm.v2_spread < 1e-8, "ring v2 spread {:.3e}", rm.v2_spread);
    assert!(rm.gamma_flatness < 1e-8, "ring gamma flatness {:.3e}", rm.gamma_flatness);
    assert!(rm.classical_gap < 1e-6, "ring trajectory gap {:.3e}", rm.classical_gap);
    assert!(rm.classical_regime);

    let mut vx_cfg = desk_cfg(ScenarioKind::VortexOscillator);
    vx_cfg.grid = (257, 257);
    vx_cfg.velocity_models = vec![VelocityModel::Bohmian];
    let vortex = Scenario::build(vx_cfg.scenario, vx_cfg.grid, vx_cfg.seed).unwrap();
    let vx_report = run_classicality_on(&vortex, &vx_cfg).unwrap();
    let vm = &vx_report.metrics[0];
    assert!(
        vm.scale_ratio < CLASSICAL_SCALE_THRESHOLD,
        "vortex scale ratio {:.2} not flagged",
        vm.scale_ratio
    );
    assert!(!vm.classical_regime);

    println!(
        "criterion 6 (classical diagnostics): PASS — ring spread {:.1e}, flatness {:.1e}, gap {:.1e}; vortex ratio {:.2} flagged non-classical",
        rm.v2_spread, rm.gamma_flatness, rm.classical_gap, vm.scale_ratio
    );
}

#[test]
fn criterion_7_conditional_classical_trajectory() {
    let scenario = coupled();
    let fields = StateFields::new(&scenario.state.psi, scenario.masses).unwrap();
    let flow = GridFlow { fields: &fields, model: VelocityModel::Bohmian };
    let x0 = scenario.kind.default_x0();
    let seed_traj = integrate_flow(&flow, x0, 0.0, 2e-3, 1e-3, 14).unwrap();
    let full = matched_classical_trajectory(scenario, &seed_traj, 0.0, TAU, 1e-3).unwrap();
    let p1_0 = scenario.masses.m1 * seed_traj.velocity(0.0).unwrap()[0];
    let cond =
        conditional_classical_trajectory(scenario, &full, x0[0], p1_0, 0.0, TAU, 1e-3).unwrap();
    let mut gap = 0.0_f64;
    for (i, &t) in cond.times.iter().enumerate() {
        let q = full.position(t).unwrap();
        gap = gap.max((cond.positions[i] - q[0]).abs());
    }
    assert!(gap < 1e-5, "conditional-vs-full classical gap {gap:.3e} >= 1e-5");
    println!("criterion 7 (conditional classical mechanics): PASS — sup gap {:.2e}", gap);
}

#[test]
fn criterion_8_frozen_ground_trivial_suite() {
    let scenario = Scenario::build_default(ScenarioKind::FrozenGround, 7).unwrap();
    let fields = StateFields::new(&scenario.state.psi, scenario.masses).unwrap();

    // velocity fields vanish identically off the mask
    let mut vmax = 0.0_f64;
    for a in 0..2 {
        for (i, &masked) in fields.v[a].mask.iter().enumerate() {
            if !masked {
                vmax = vmax.max(fields.v[a].field.values.as_slice().unwrap()[i].abs());
            }
        }
    }
    assert_eq!(vmax, 0.0, "ground-state velocity must vanish exactly");

    // trajectories are static
    let flow = GridFlow { fields: &fields, model: VelocityModel::Bohmian };
    let x0 = scenario.kind.default_x0();
    let traj = integrate_flow(&flow, x0, 0.0, TAU + 2e-3, 1e-3, 14).unwrap();
    let end = traj.end();
    assert_eq!(end[0], x0[0]);
    assert_eq!(end[1], x0[1]);

    // the conditional state never changes
    let machine = ConditionalMachine::new(&scenario, &fields).unwrap();
    let s_a = machine.slice(&traj, 0.3).unwrap();
    let s_b = machine.slice(&traj, 5.9).unwrap();
    assert_eq!(s_a.psi, s_b.psi, "conditional state must be time-independent");

    // quantum potentials balance the classical energy budget to stencil
    // order: sup |Q1 + Q2 + V - E| over trusted points refines away
    let sup_balance = |n: usize| {
        let s = Scenario::build(ScenarioKind::FrozenGround, (n, n), 7).unwrap();
        let f = StateFields::new(&s.state.psi, s.masses).unwrap();
        let m = ConditionalMachine::new(&s, &f).unwrap();
        let fl = GridFlow { fields: &f, model: VelocityModel::Bohmian };
        let tr = integrate_flow(&fl, s.kind.default_x0(), 0.0, 1.0, 1e-3, 14).unwrap();
        let sl = m.slice(&tr, 0.5).unwrap();
        let e = s.kind.continuum_energy().unwrap();
        let excl = sl.trusted_exclusion();
        let mut sup = 0.0_f64;
        for i in 0..sl.psi.len() {
            if !excl[i] {
                sup = sup.max((sl.q1[i] + sl.q2[i] + sl.v_pot[i] - e).abs());
            }
        }
        sup
    };
    let coarse = sup_balance(129);
    let fine = sup_balance(257);
    assert!(fine < 2e-2, "energy balance defect {fine:.3e} at fine grid");
    assert!(coarse / fine > 3.0, "balance defect must refine at stencil order");

    // the continuity rate is flagged singular (zero environment velocity)
    let series = build_series(&machine, &traj, &[1.0], 1e-3).unwrap();
    let gamma = gamma_conditional(&series.triplets[0], machine.velocity_floor(TAU));
    assert!(gamma.singular_velocity);
    assert!(gamma.mean.abs() < 1e-9);

    println!(
        "criterion 8 (frozen ground): PASS — v = 0, static trajectory, static conditional state, balance defect {:.2e} refining {:.1}x, singular rate flagged",
        fine,
        coarse / fine
    );
}

#[test]
fn criterion_9_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_text = |out: &std::path::Path| {
        format!(
            "[run]\nscenario = ring_planewave_env\nvelocity_models = bohmian, stream=0.15\n\
             lambda_sweep = -1, 0\nn_ensemble = 150\nt_final = 0.8\ndt = 2e-3\n\
             dt_slice = 0.1\ngrid = 65x64\nseed = 13\nout_dir = {}\n",
            out.display()
        )
    };

    let mut manifests = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let mut cfg = parse_config_str(&cfg_text(&out)).unwrap();
        cfg.out_dir = out;
        manifests.push(run(Command::Compare, &cfg, true).unwrap());
    }
    assert_eq!(manifests[0].files.len(), manifests[1].files.len());
    for (fa, fb) in manifests[0].files.iter().zip(&manifests[1].files) {
        assert_eq!(fa.path, fb.path);
        assert_eq!(fa.sha256, fb.sha256, "artifact {} differs between reruns", fa.path);
        let ba = std::fs::read(dir.path().join("a").join(&fa.path)).unwrap();
        let bb = std::fs::read(dir.path().join("b").join(&fb.path)).unwrap();
        assert_eq!(ba, bb, "artifact {} bytes differ", fa.path);
    }

    // a third run driven only by the first run's manifest snapshot + seed
    // reproduces the same digests
    let mut cfg = parse_config_str(&manifests[0].config_snapshot).unwrap();
    assert_eq!(cfg.seed, manifests[0].seed);
    cfg.out_dir = dir.path().join("c");
    let replay = run(Command::Compare, &cfg, true).unwrap();
    for (fa, fc) in manifests[0].files.iter().zip(&replay.files) {
        assert_eq!(fa.sha256, fc.sha256, "manifest replay diverged on {}", fa.path);
    }

    println!(
        "criterion 9 (determinism): PASS — {} artifacts byte-identical across reruns and manifest replay",
        manifests[0].files.len()
    );
}
