//! The central approximation: when the environment particle is heavy and
//! its wave packet stays narrow in velocity, the conditional wave function
//! obeys an ordinary one-particle Schrodinger equation with the classical
//! time-dependent potential `V(x1, X2(t))`, up to a physically irrelevant
//! global gauge. This example measures the residual of that equation along
//! a trajectory in the coupled heavy-environment state and cross-checks by
//! propagating the initial slice with a Crank-Nicolson integrator under
//! the same time-dependent potential.
//!
//! Run with: cargo run --release -p condwave --example conditional_schrodinger

use anyhow::Result;
use condwave::conditional::{
    min_phase_distance, normalize_1d, propagate_reference, residual_report, ConditionalMachine,
};
use condwave::dynamics::{integrate_flow, GridFlow, StateFields, VelocityModel};
use condwave::stationary::{Scenario, ScenarioKind};
use std::f64::consts::TAU;
use std::time::Instant;

fn main() -> Result<()> {
    println!("solving the coupled heavy-environment eigenstate (this is the slow part) ...");
    let t0 = Instant::now();
    let scenario = Scenario::build_default(ScenarioKind::CoupledHeavyEnv, 7)?;
    println!("done in {:.1} s, energy {:.6}\n", t0.elapsed().as_secs_f64(), scenario.state.energy);

    let fields = StateFields::new(&scenario.state.psi, scenario.masses)?;
    let machine = ConditionalMachine::new(&scenario, &fields)?;
    let flow = GridFlow { fields: &fields, model: VelocityModel::Bohmian };
    let dt = 1e-3;
    let traj = integrate_flow(&flow, scenario.kind.default_x0(), 0.0, TAU + 2.0 * dt, dt, 14)?;

    // checkpoints laid out so the reference integrator lands on them exactly
    let n_checks = 157;
    let step = TAU / n_checks as f64;
    let times: Vec<f64> = (1..=n_checks).map(|k| k as f64 * step).collect();
    let report = residual_report(&machine, &traj, &times, dt, scenario.state.energy, TAU)?;

    // independent check: Crank-Nicolson propagation of the initial slice
    // under V(x1, X2(t)), compared gauge-independently
    let slice0 = machine.slice(&traj, 0.0)?;
    let mut psi0 = slice0.psi.clone();
    normalize_1d(&mut psi0, &machine.w1)?;
    let per_check = (step / dt).round() as usize;
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
        TAU,
        step / per_check as f64,
        per_check,
    )?;

    let mut deviations = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let slice = machine.slice(&traj, t)?;
        let mut psi = slice.psi.clone();
        normalize_1d(&mut psi, &machine.w1)?;
        deviations.push(min_phase_distance(&psi, &reference.states[k + 1], &machine.w1));
    }

    println!("{:>8} {:>12} {:>12} {:>12}", "t", "r_exact", "r_schrod", "deviation");
    for k in (0..times.len()).step_by(26) {
        println!(
            "{:>8.3} {:>12.3e} {:>12.3e} {:>12.3e}",
            times[k], report.r_pseudo[k], report.r_cond_schrod[k], deviations[k]
        );
    }
    let worst_r = report.r_cond_schrod.iter().cloned().fold(0.0, f64::max);
    let worst_dev = deviations.iter().cloned().fold(0.0, f64::max);
    println!();
    println!("max residual of the classical-potential equation: {worst_r:.3e}");
    println!("max deviation from the reference propagation    : {worst_dev:.3e}");
    println!(
        "environment classicality: scale ratio {:.1}, velocity spread {:.2e}, rate flatness {:.2e}",
        report.classicality.scale_ratio,
        report.classicality.v2_spread,
        report.classicality.gamma_flatness
    );
    if report.flags.singular_velocity || report.flags.node_dominated {
        println!("flags: {:?}", report.flags);
    }
    Ok(())
}
