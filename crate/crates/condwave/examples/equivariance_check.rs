//! Push an ensemble of configuration points, initially distributed as
//! `|psi|^2`, through each velocity law and measure how far the empirical
//! distribution strays from `|psi|^2` over time (total-variation distance
//! on a coarse binning). Every divergence-free modification of the
//! guidance law preserves the distribution, so all models should stay
//! within the sampling-noise band estimated by bootstrap resampling.
//!
//! Run with: cargo run --release -p condwave --example equivariance_check

use anyhow::Result;
use condwave::config::ExperimentConfig;
use condwave::experiments::run_equivariance_on;
use condwave::stationary::{Scenario, ScenarioKind};
use std::f64::consts::TAU;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::default_for(ScenarioKind::VortexOscillator);
    cfg.n_ensemble = 4000;
    cfg.t_final = TAU;
    cfg.dt = 2e-3;
    cfg.seed = 7;

    let scenario = Scenario::build(cfg.scenario, cfg.grid, cfg.seed)?;
    println!(
        "ensemble of {} points, {} checkpoints to t = {:.3}",
        cfg.n_ensemble,
        condwave::experiments::EQUIVARIANCE_CHECKPOINTS,
        cfg.t_final
    );
    let report = run_equivariance_on(&scenario, &cfg)?;

    println!(
        "sampling-noise level: TV = {:.4} +- {:.4} over {} bootstrap reseeds",
        report.bootstrap_mean,
        report.bootstrap_sigma,
        condwave::experiments::BOOTSTRAP_RESEEDS
    );
    println!("acceptance threshold (mean + 3 sigma): {:.4}", report.threshold);
    println!();
    println!("{:<22} {:>10} {:>10} {:>8}", "model", "TV(0)", "TV(end)", "frozen");
    for m in &report.models {
        let status = if *m.tv.last().unwrap() <= report.threshold { "" } else { "  <-- DRIFTED" };
        println!(
            "{:<22} {:>10.4} {:>10.4} {:>8}{status}",
            m.model,
            m.tv[0],
            m.tv.last().unwrap(),
            m.frozen_members
        );
    }
    Ok(())
}
