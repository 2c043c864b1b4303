//! Command-line front end: subcommand dispatch, config resolution with
//! flag overrides, and deterministic CSV/JSON artifact output with a
//! digest manifest.
//!
//! Every subcommand writes only inside the chosen output directory and
//! finishes by writing `manifest.json` (config snapshot, seed, file
//! digests) so a run can be reproduced exactly from its manifest.

use crate::conditional::{residual_report, ConditionalMachine};
use crate::config::{parse_config, parse_grid_spec, ExperimentConfig};
use crate::dynamics::{integrate_flow, GridFlow, StateFields};
use crate::experiments::{
    run_classicality_on, run_equivariance_on, run_velocity_comparison_on, ClassicalityReport,
    ComparisonReport, EquivarianceReport,
};
use crate::report::{fmt_f64, OutputWriter, RunManifest};
use crate::stationary::{Scenario, ScenarioKind};
use crate::{Error, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "condwave",
    version,
    about = "Conditional wave function experiments for two-particle eigenstates"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Sectioned key=value experiment config; defaults to the vortex
    /// scenario when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory (overrides the config).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Random seed (overrides the config).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Grid size as N1xN2, e.g. 257x129 (overrides the config).
    #[arg(long, global = true, value_name = "N1xN2")]
    pub grid: Option<String>,

    /// Suppress progress output on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    /// List the built-in scenarios and their parameters.
    Scenarios,
    /// Propagate sampled ensembles under each velocity model and measure
    /// total-variation distance from the stationary density.
    Equivariance,
    /// Report the classical-environment diagnostics per velocity model.
    Classicality,
    /// Sweep the velocity-model family and compare conditional states
    /// against the classical-environment reference propagation.
    Compare,
    /// Conditional residual series (exact identity and Schroedinger
    /// approximation) per velocity model.
    Residuals,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Scenarios => "scenarios",
            Command::Equivariance => "equivariance",
            Command::Classicality => "classicality",
            Command::Compare => "compare",
            Command::Residuals => "residuals",
        }
    }
}

/// Resolve the effective config: file (or vortex defaults), then flag
/// overrides, then validation.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default_for(ScenarioKind::VortexOscillator),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(spec) = &cli.grid {
        cfg.grid = parse_grid_spec(spec)?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioInfo {
    pub name: String,
    pub masses: (f64, f64),
    pub extents: [(f64, f64); 2],
    pub boundaries: [String; 2],
    pub default_grid: (usize, usize),
    pub default_x0: [f64; 2],
    pub default_t_end: f64,
    pub continuum_energy: Option<f64>,
    pub env_wavenumber: Option<i64>,
}

pub fn scenario_catalog() -> Vec<ScenarioInfo> {
    ScenarioKind::all()
        .iter()
        .map(|k| {
            let m = k.masses();
            let b = k.boundaries();
            ScenarioInfo {
                name: k.name().to_string(),
                masses: (m.m1, m.m2),
                extents: k.extents(),
                boundaries: [format!("{:?}", b[0]), format!("{:?}", b[1])],
                default_grid: k.default_shape(),
                default_x0: k.default_x0(),
                default_t_end: k.default_t_end(),
                continuum_energy: k.continuum_energy(),
                env_wavenumber: k.env_wavenumber(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
struct ModelResiduals {
    model: String,
    #[serde(flatten)]
    report: crate::conditional::ResidualReport,
}

#[derive(Clone, Debug, Serialize)]
struct ResidualsOutput {
    scenario: String,
    grid: (usize, usize),
    seed: u64,
    energy: f64,
    t_final: f64,
    models: Vec<ModelResiduals>,
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Execute a subcommand against a resolved config; returns the manifest
/// of the artifacts written. All file output goes through one
/// [`OutputWriter`] rooted at `cfg.out_dir`.
pub fn run(command: Command, cfg: &ExperimentConfig, quiet: bool) -> Result<RunManifest> {
    let mut out = OutputWriter::create(&cfg.out_dir)?;
    let status = |line: String| {
        if !quiet {
            println!("[{}] {}", command.name(), line);
        }
    };

    match command {
        Command::Scenarios => {
            let catalog = scenario_catalog();
            out.write_json("scenarios.json", &catalog)?;
            let rows: Vec<Vec<String>> = catalog
                .iter()
                .map(|s| {
                    vec![
                        s.name.clone(),
                        fmt_f64(s.masses.0),
                        fmt_f64(s.masses.1),
                        format!("{}x{}", s.default_grid.0, s.default_grid.1),
                        s.boundaries[1].to_lowercase(),
                        fmt_f64(s.default_t_end),
                        opt_f64(s.continuum_energy),
                        s.env_wavenumber.map(|k| k.to_string()).unwrap_or_default(),
                    ]
                })
                .collect();
            out.write_csv(
                "scenarios.csv",
                &["name", "m1", "m2", "default_grid", "env_boundary", "t_end", "energy", "wavenumber"],
                &rows,
            )?;
            for s in &catalog {
                status(format!(
                    "{}: masses ({}, {}), grid {}x{}, E = {}",
                    s.name,
                    s.masses.0,
                    s.masses.1,
                    s.default_grid.0,
                    s.default_grid.1,
                    s.continuum_energy.map(|e| fmt_f64(e)).unwrap_or_else(|| "numeric".into()),
                ));
            }
        }
        Command::Equivariance => {
            let scenario = Scenario::build(cfg.scenario, cfg.grid, cfg.seed)?;
            status(format!("scenario {} on {}x{}", scenario.kind.name(), cfg.grid.0, cfg.grid.1));
            let report = run_equivariance_on(&scenario, cfg)?;
            status(format!(
                "bootstrap TV = {:.4} +- {:.4} (threshold {:.4})",
                report.bootstrap_mean, report.bootstrap_sigma, report.threshold
            ));
            for m in &report.models {
                status(format!(
                    "{}: TV(t_final) = {:.4}{}",
                    m.model,
                    m.tv.last().unwrap(),
                    if m.frozen_members > 0 {
                        format!(" ({} frozen members)", m.frozen_members)
                    } else {
                        String::new()
                    }
                ));
            }
            write_equivariance(&mut out, &report)?;
        }
        Command::Classicality => {
            let scenario = Scenario::build(cfg.scenario, cfg.grid, cfg.seed)?;
            status(format!("scenario {} on {}x{}", scenario.kind.name(), cfg.grid.0, cfg.grid.1));
            let report = run_classicality_on(&scenario, cfg)?;
            for m in &report.metrics {
                status(format!(
                    "{}: scale ratio {:.3}, v2 spread {:.3e}, gap {:.3e}{}",
                    m.model,
                    m.scale_ratio,
                    m.v2_spread,
                    m.classical_gap,
                    if m.classical_regime { " [classical]" } else { "" }
                ));
            }
            write_classicality(&mut out, &report)?;
        }
        Command::Compare => {
            let scenario = Scenario::build(cfg.scenario, cfg.grid, cfg.seed)?;
            status(format!("scenario {} on {}x{}", scenario.kind.name(), cfg.grid.0, cfg.grid.1));
            let report = run_velocity_comparison_on(&scenario, cfg)?;
            for p in &report.points {
                status(format!(
                    "{}: deviation {:.4} (ratio {:.2}), residual {:.3e} (ratio {:.2}){}",
                    p.model,
                    p.deviation_final,
                    p.deviation_ratio,
                    p.r_final,
                    p.residual_ratio,
                    if p.ratio_flagged { " [flagged]" } else { "" }
                ));
            }
            write_comparison(&mut out, &report)?;
        }
        Command::Residuals => {
            let scenario = Scenario::build(cfg.scenario, cfg.grid, cfg.seed)?;
            status(format!("scenario {} on {}x{}", scenario.kind.name(), cfg.grid.0, cfg.grid.1));
            let fields = StateFields::new(&scenario.state.psi, scenario.masses)?;
            let machine = ConditionalMachine::new(&scenario, &fields)?;
            let energy = scenario.kind.continuum_energy().unwrap_or(scenario.state.energy);
            let checkpoints = cfg.checkpoints();
            let mut models = Vec::new();
            for &model in &cfg.velocity_models {
                let flow = GridFlow { fields: &fields, model };
                let traj = integrate_flow(
                    &flow,
                    scenario.kind.default_x0(),
                    0.0,
                    cfg.t_final + 2.0 * cfg.dt,
                    cfg.dt,
                    14,
                )?;
                let rep =
                    residual_report(&machine, &traj, &checkpoints, cfg.dt, energy, cfg.t_final)?;
                status(format!(
                    "{}: max pseudo residual {:.3e}, max cond-Schrodinger residual {:.3e}",
                    model.label(),
                    rep.r_pseudo.iter().cloned().fold(0.0, f64::max),
                    rep.r_cond_schrod.iter().cloned().fold(0.0, f64::max),
                ));
                models.push(ModelResiduals { model: model.label(), report: rep });
            }
            let output = ResidualsOutput {
                scenario: scenario.kind.name().into(),
                grid: cfg.grid,
                seed: cfg.seed,
                energy,
                t_final: cfg.t_final,
                models,
            };
            out.write_json("residuals.json", &output)?;
            for m in &output.models {
                let rows: Vec<Vec<String>> = m
                    .report
                    .times
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| {
                        vec![
                            fmt_f64(t),
                            fmt_f64(m.report.r_pseudo[i]),
                            fmt_f64(m.report.r_cond_schrod[i]),
                            fmt_f64(m.report.f_dot[i]),
                            fmt_f64(m.report.gauge_spread[i]),
                        ]
                    })
                    .collect();
                out.write_csv(
                    &format!("residuals_{}.csv", file_label(&m.model)),
                    &["t", "r_pseudo", "r_cond_schrod", "f_dot", "gauge_spread"],
                    &rows,
                )?;
            }
        }
    }

    let manifest = out.finish(command.name(), cfg.seed, &cfg.snapshot())?;
    status(format!(
        "wrote {} files + manifest to {}",
        manifest.files.len(),
        cfg.out_dir.display()
    ));
    Ok(manifest)
}

/// Model label as a file-name fragment (`scaled=-1` -> `scaled_-1`).
fn file_label(label: &str) -> String {
    label.replace('=', "_")
}

fn write_equivariance(out: &mut OutputWriter, report: &EquivarianceReport) -> Result<()> {
    out.write_json("equivariance.json", report)?;
    let mut rows = Vec::new();
    for m in &report.models {
        for (i, &t) in m.times.iter().enumerate() {
            rows.push(vec![m.model.clone(), fmt_f64(t), fmt_f64(m.tv[i])]);
        }
    }
    out.write_csv("equivariance.csv", &["model", "t", "tv"], &rows)
}

fn write_classicality(out: &mut OutputWriter, report: &ClassicalityReport) -> Result<()> {
    out.write_json("classicality.json", report)?;
    let rows: Vec<Vec<String>> = report
        .metrics
        .iter()
        .map(|m| {
            vec![
                m.model.clone(),
                fmt_f64(m.scale_ratio),
                fmt_f64(m.v2_spread),
                fmt_f64(m.gamma_flatness),
                fmt_f64(m.classical_gap),
                m.singular_velocity.to_string(),
                m.classical_regime.to_string(),
            ]
        })
        .collect();
    out.write_csv(
        "classicality.csv",
        &[
            "model",
            "scale_ratio",
            "v2_spread",
            "gamma_flatness",
            "classical_gap",
            "singular_velocity",
            "classical_regime",
        ],
        &rows,
    )
}

fn write_comparison(out: &mut OutputWriter, report: &ComparisonReport) -> Result<()> {
    out.write_json("comparison.json", report)?;
    let mut long = Vec::new();
    for p in &report.points {
        let lam = opt_f64(p.lambda);
        for (i, &t) in p.times.iter().enumerate() {
            long.push(vec![
                p.model.clone(),
                lam.clone(),
                fmt_f64(t),
                "r_cond_schrod".into(),
                fmt_f64(p.r_cond_schrod[i]),
            ]);
            long.push(vec![
                p.model.clone(),
                lam.clone(),
                fmt_f64(t),
                "deviation".into(),
                fmt_f64(p.deviation[i]),
            ]);
            long.push(vec![
                p.model.clone(),
                lam.clone(),
                fmt_f64(t),
                "tv".into(),
                fmt_f64(p.tv[i]),
            ]);
        }
        let t_end = *p.times.last().unwrap();
        for (metric, value) in [
            ("residual_ratio", p.residual_ratio),
            ("deviation_ratio", p.deviation_ratio),
            ("scale_ratio", p.classicality.scale_ratio),
            ("classical_gap", p.classicality.classical_gap),
        ] {
            long.push(vec![
                p.model.clone(),
                lam.clone(),
                fmt_f64(t_end),
                metric.into(),
                fmt_f64(value),
            ]);
        }

        let rows: Vec<Vec<String>> = p
            .times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                vec![
                    fmt_f64(t),
                    fmt_f64(p.r_cond_schrod[i]),
                    fmt_f64(p.deviation[i]),
                    fmt_f64(p.tv[i]),
                ]
            })
            .collect();
        out.write_csv(
            &format!("compare_{}.csv", file_label(&p.model)),
            &["t", "r_cond_schrod", "deviation", "tv"],
            &rows,
        )?;
    }
    out.write_csv("comparison_long.csv", &["model", "lambda", "t", "metric", "value"], &long)
}

/// Machine-readable record written to stderr when a run fails.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

/// Full CLI entry point: parse nothing (the caller did), run, report.
/// Returns the process exit code.
pub fn main_with(cli: &Cli) -> i32 {
    let cfg = match resolve_config(cli) {
        Ok(cfg) => cfg,
        Err(e) => return report_error(&e),
    };
    match run(cli.command, &cfg, cli.quiet) {
        Ok(_) => 0,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> i32 {
    let record =
        ErrorRecord { error: e.class(), message: e.to_string(), exit_code: e.exit_code() };
    eprintln!("{}", serde_json::to_string(&record).unwrap_or_else(|_| e.to_string()));
    record.exit_code
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn frozen_cfg_text(out_dir: &std::path::Path) -> String {
        format!(
            "[run]\nscenario = frozen_ground\nvelocity_models = bohmian\nn_ensemble = 150\n\
             t_final = 0.4\ndt = 2e-3\ndt_slice = 0.1\ngrid = 65x65\nseed = 5\nout_dir = {}\n",
            out_dir.display()
        )
    }

    fn cli_for(cmd: Command, config: Option<PathBuf>) -> Cli {
        Cli { command: cmd, config, out: None, seed: None, grid: None, quiet: true }
    }

    #[test]
    fn flag_overrides_beat_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.cfg");
        fs::write(&cfg_path, frozen_cfg_text(dir.path())).unwrap();
        let mut cli = cli_for(Command::Scenarios, Some(cfg_path));
        cli.seed = Some(99);
        cli.grid = Some("33x41".into());
        cli.out = Some(dir.path().join("elsewhere"));
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.grid, (33, 41));
        assert_eq!(cfg.out_dir, dir.path().join("elsewhere"));
        assert_eq!(cfg.scenario, ScenarioKind::FrozenGround);
    }

    #[test]
    fn scenarios_subcommand_writes_catalog_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cli = cli_for(Command::Scenarios, None);
        cli.out = Some(dir.path().to_path_buf());
        let cfg = resolve_config(&cli).unwrap();
        let manifest = run(Command::Scenarios, &cfg, true).unwrap();
        assert_eq!(manifest.subcommand, "scenarios");
        let names: Vec<_> = manifest.files.iter().map(|f| f.path.as_str()).collect();
        assert!(names.contains(&"scenarios.json"));
        assert!(names.contains(&"scenarios.csv"));
        let text = fs::read_to_string(dir.path().join("scenarios.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.as_array().unwrap().len(), 4);
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn equivariance_run_produces_consistent_manifest_digests() {
        let dir = tempfile::tempdir().unwrap();
        let out_dir = dir.path().join("run");
        let cfg_path = dir.path().join("run.cfg");
        fs::write(&cfg_path, frozen_cfg_text(&out_dir)).unwrap();
        let cli = cli_for(Command::Equivariance, Some(cfg_path));
        let cfg = resolve_config(&cli).unwrap();
        let manifest = run(Command::Equivariance, &cfg, true).unwrap();
        assert!(!manifest.files.is_empty());
        for f in &manifest.files {
            let bytes = fs::read(out_dir.join(&f.path)).unwrap();
            assert_eq!(bytes.len() as u64, f.bytes, "{} size", f.path);
            use sha2::{Digest, Sha256};
            let digest = format!("{:x}", Sha256::digest(&bytes));
            assert_eq!(digest, f.sha256, "{} digest", f.path);
        }
    }

    #[test]
    fn identical_reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifests = Vec::new();
        for sub in ["a", "b"] {
            let out_dir = dir.path().join(sub);
            let cfg_path = dir.path().join(format!("{sub}.cfg"));
            fs::write(&cfg_path, frozen_cfg_text(&out_dir)).unwrap();
            let cli = cli_for(Command::Classicality, Some(cfg_path));
            let cfg = resolve_config(&cli).unwrap();
            manifests.push(run(Command::Classicality, &cfg, true).unwrap());
        }
        let (a, b) = (&manifests[0], &manifests[1]);
        assert_eq!(a.files.len(), b.files.len());
        for (fa, fb) in a.files.iter().zip(&b.files) {
            assert_eq!(fa.path, fb.path);
            assert_eq!(fa.sha256, fb.sha256, "{} differs between reruns", fa.path);
        }
        let bytes_a = fs::read(dir.path().join("a/classicality.json")).unwrap();
        let bytes_b = fs::read(dir.path().join("b/classicality.json")).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn residuals_run_emits_per_model_series() {
        let dir = tempfile::tempdir().unwrap();
        let out_dir = dir.path().join("run");
        let cfg_path = dir.path().join("run.cfg");
        fs::write(&cfg_path, frozen_cfg_text(&out_dir)).unwrap();
        let cli = cli_for(Command::Residuals, Some(cfg_path));
        let cfg = resolve_config(&cli).unwrap();
        let manifest = run(Command::Residuals, &cfg, true).unwrap();
        let names: Vec<_> = manifest.files.iter().map(|f| f.path.as_str()).collect();
        assert!(names.contains(&"residuals.json"));
        assert!(names.contains(&"residuals_bohmian.csv"));
        let text = fs::read_to_string(out_dir.join("residuals_bohmian.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,r_pseudo,r_cond_schrod,f_dot,gauge_spread");
        assert_eq!(lines.count(), cfg.checkpoints().len());
    }

    #[test]
    fn error_records_are_machine_readable() {
        let e = Error::InvalidArgument("bad".into());
        let rec =
            ErrorRecord { error: e.class(), message: e.to_string(), exit_code: e.exit_code() };
        let text = serde_json::to_string(&rec).unwrap();
        assert!(text.contains("\"error\":\"invalid_argument\""));
        assert!(text.contains("\"exit_code\":2"));
    }

    #[test]
    fn command_line_parses_subcommands_and_flags() {
        let cli = Cli::parse_from([
            "condwave",
            "compare",
            "--config",
            "c.cfg",
            "--out",
            "r",
            "--seed",
            "42",
            "--grid",
            "129x65",
            "--quiet",
        ]);
        assert_eq!(cli.command, Command::Compare);
        assert_eq!(cli.config.as_deref(), Some(std::path::Path::new("c.cfg")));
        assert_eq!(cli.out.as_deref(), Some(std::path::Path::new("r")));
        assert_eq!(cli.seed, Some(42));
        assert_eq!(cli.grid.as_deref(), Some("129x65"));
        assert!(cli.quiet);
    }
}
