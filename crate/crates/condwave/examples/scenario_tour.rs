//! Walk through the four built-in scenarios: print their static facts,
//! build each state, and verify it against the strongest check available
//! (closed-form Hamiltonian application for the analytic states, the
//! eigen-residual for the numerically solved one).
//!
//! Run with: cargo run --release -p condwave --example scenario_tour

use anyhow::Result;
use condwave::stationary::{analytic_state_check, Scenario, ScenarioKind};
use std::time::Instant;

fn main() -> Result<()> {
    for kind in ScenarioKind::all() {
        let masses = kind.masses();
        let [(a1, b1), (a2, b2)] = kind.extents();
        let [bc1, bc2] = kind.boundaries();
        println!("scenario '{}'", kind.name());
        println!("  masses      : m1 = {}, m2 = {}", masses.m1, masses.m2);
        println!("  domain      : [{a1}, {b1}] ({bc1:?}) x [{a2}, {b2}] ({bc2:?})");
        println!("  default grid: {:?}", kind.default_shape());
        println!("  start point : {:?}", kind.default_x0());
        if let Some(k) = kind.env_wavenumber() {
            println!("  env mode    : plane-wave number {k}");
        }

        // The coupled scenario needs a sparse eigensolve; a reduced grid
        // keeps the tour quick while the others run at full resolution.
        let shape = match kind {
            ScenarioKind::CoupledHeavyEnv => (65, 256),
            _ => kind.default_shape(),
        };
        let t0 = Instant::now();
        let scenario = Scenario::build(kind, shape, 7)?;
        let dt = t0.elapsed().as_secs_f64();
        println!("  built {:?} in {dt:.1} s, energy {:.6}", shape, scenario.state.energy);
        match analytic_state_check(&scenario) {
            Some(check) => println!(
                "  closed-form Hamiltonian residual {:.2e} (state alignment defect {:.2e})",
                check.residual, check.state_alignment_defect
            ),
            None => println!(
                "  numeric eigen-residual {:.2e} (no closed form available)",
                scenario.state.residual
            ),
        }
        println!();
    }
    Ok(())
}
