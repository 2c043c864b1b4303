//! Sweep the scaled velocity law `u = (1 + lambda) v` through a range of
//! lambda and compare each variant against the standard guidance law in
//! the coupled heavy-environment state. All variants transport `|psi|^2`
//! (equivariance), so ensemble statistics cannot tell them apart; what
//! does discriminate is the conditional dynamics, because the environment
//! trajectory itself changes. Each variant's gauge-corrected conditional
//! state is compared against one canonical reference: the Schrodinger
//! propagation of the initial slice under the moving potential the
//! unmodified law generates. The worst deviation over the run grows
//! with |lambda|.
//!
//! Run with: cargo run --release -p condwave --example velocity_model_comparison

use anyhow::Result;
use condwave::config::ExperimentConfig;
use condwave::dynamics::VelocityModel;
use condwave::experiments::run_velocity_comparison_on;
use condwave::stationary::{Scenario, ScenarioKind};
use std::f64::consts::PI;
use std::time::Instant;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::default_for(ScenarioKind::CoupledHeavyEnv);
    cfg.lambda_sweep = vec![-1.0, -0.5, -0.1, 0.0, 0.1, 0.5, 1.0];
    cfg.velocity_models = vec![VelocityModel::Bohmian, VelocityModel::StreamShift { lambda: 0.15 }];
    cfg.n_ensemble = 500;
    cfg.t_final = PI;
    cfg.dt = 1e-3;
    cfg.dt_slice = 2e-2;
    cfg.seed = 7;

    println!("solving the coupled heavy-environment eigenstate ...");
    let t0 = Instant::now();
    let scenario = Scenario::build(cfg.scenario, cfg.grid, cfg.seed)?;
    println!("done in {:.1} s\n", t0.elapsed().as_secs_f64());

    let report = run_velocity_comparison_on(&scenario, &cfg)?;
    println!(
        "baseline (standard law): final residual {:.3e}, final deviation {:.3e}",
        report.baseline_r_final, report.baseline_deviation_final
    );
    println!();
    println!(
        "{:<18} {:>12} {:>12} {:>10} {:>10} {:>10}",
        "model", "resid ratio", "dev ratio", "TV(end)", "frozen", "classical"
    );
    for p in &report.points {
        let label = match p.lambda {
            Some(l) => format!("scaled {l:+.2}"),
            None => p.model.clone(),
        };
        let flag = if p.ratio_flagged { " *" } else { "" };
        println!(
            "{label:<18} {:>12.3} {:>12.3} {:>10.4} {:>10} {:>10}{flag}",
            p.residual_ratio,
            p.deviation_ratio,
            p.tv.last().unwrap(),
            p.frozen_members,
            p.classicality.classical_regime
        );
    }
    println!();
    println!("TV stays at sampling noise for every lambda (equivariance holds),");
    println!("while the deviation ratio orders the models by |lambda|: the");
    println!("conditional dynamics distinguishes laws that ensemble statistics cannot.");
    Ok(())
}
