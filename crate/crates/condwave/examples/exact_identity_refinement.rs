//! The conditional wave function satisfies an effective Schrodinger-type
//! equation *identically*: kinetic term, conditional potential, the
//! environment's conditional quantum potential, a gauge term, and a
//! complex rate term built from the continuity equation. On a grid the
//! identity holds up to discretization error, so its residual must shrink
//! at second order under refinement — and must NOT shrink if the complex
//! rate term is dropped, proving that term is load-bearing.
//!
//! Run with: cargo run --release -p condwave --example exact_identity_refinement

use anyhow::Result;
use condwave::conditional::{
    build_series, gamma_conditional, pseudo_schrodinger_residual, ConditionalMachine,
    PseudoOptions,
};
use condwave::dynamics::{integrate_flow, GridFlow, StateFields, VelocityModel};
use condwave::stationary::{Scenario, ScenarioKind};

fn main() -> Result<()> {
    // Halve grid spacing and slice step together. Starting from 257 keeps
    // the points the node mask excludes aligned between resolutions, so the
    // sup over trusted points compares like with like.
    let times = [0.4, 0.9, 1.7, 2.3];
    let mut rows = Vec::new();
    for (n, dt_fd) in [(257, 1e-3), (513, 5e-4)] {
        let scenario = Scenario::build(ScenarioKind::VortexOscillator, (n, n), 7)?;
        let fields = StateFields::new(&scenario.state.psi, scenario.masses)?;
        let machine = ConditionalMachine::new(&scenario, &fields)?;
        let flow = GridFlow { fields: &fields, model: VelocityModel::Bohmian };
        let traj = integrate_flow(&flow, [1.0, 0.0], 0.0, 3.0, 1e-3, 8)?;
        let series = build_series(&machine, &traj, &times, dt_fd)?;
        let floor = machine.velocity_floor(3.0);
        let energy = scenario.kind.continuum_energy().unwrap();

        let mut full = 0.0_f64;
        let mut ablated = 0.0_f64;
        for trip in &series.triplets {
            let gamma = gamma_conditional(trip, floor);
            full = full.max(pseudo_schrodinger_residual(
                &machine,
                trip,
                &gamma,
                PseudoOptions { energy, include_gamma: true },
            ));
            ablated = ablated.max(pseudo_schrodinger_residual(
                &machine,
                trip,
                &gamma,
                PseudoOptions { energy, include_gamma: false },
            ));
        }
        rows.push((n, dt_fd, full, ablated));
    }

    println!("{:>6} {:>10} {:>14} {:>16}", "grid", "dt(fd)", "full residual", "without rate");
    for &(n, dt_fd, full, ablated) in &rows {
        println!("{n:>6} {dt_fd:>10.1e} {full:>14.3e} {ablated:>16.3e}");
    }
    println!();
    for pair in rows.windows(2) {
        let order = (pair[0].2 / pair[1].2).log2();
        println!(
            "refinement {} -> {}: observed order {:.2} (full identity)",
            pair[0].0, pair[1].0, order
        );
    }
    println!(
        "rate-ablated residual does not refine ({:.3} -> {:.3}): the dropped term is",
        rows.first().unwrap().3,
        rows.last().unwrap().3
    );
    println!("physical, not a discretization artifact.");
    Ok(())
}
