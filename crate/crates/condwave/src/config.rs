//! Experiment configuration: a plain sectioned key-value format (INI-like)
//! with defaults per scenario, strict unknown-key rejection, and a
//! canonical snapshot form for run manifests.

use crate::dynamics::VelocityModel;
use crate::stationary::ScenarioKind;
use crate::{Error, Result};
use std::path::{Path, PathBuf};

/// Default stream-shift strength used when a config lists the stream model
/// without a value.
pub const DEFAULT_STREAM_LAMBDA: f64 = 0.15;

/// Scaling factors probed by the comparison sweep when the config does not
/// override `lambda_sweep`.
pub const DEFAULT_LAMBDA_SWEEP: [f64; 7] = [-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 2.0];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    pub velocity_models: Vec<VelocityModel>,
    pub lambda_sweep: Vec<f64>,
    pub n_ensemble: usize,
    pub t_final: f64,
    /// Trajectory integration step.
    pub dt: f64,
    /// Spacing of the slice-analysis checkpoints.
    pub dt_slice: f64,
    pub grid: (usize, usize),
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// All defaults for a scenario: its natural grid, one orbital period,
    /// millistep integration, checkpoints every 20 steps, a 10^4 ensemble.
    pub fn default_for(kind: ScenarioKind) -> ExperimentConfig {
        ExperimentConfig {
            scenario: kind,
            velocity_models: vec![
                VelocityModel::Bohmian,
                VelocityModel::Scaled { lambda: -1.0 },
                VelocityModel::Scaled { lambda: 0.5 },
                VelocityModel::Scaled { lambda: 2.0 },
                VelocityModel::StreamShift { lambda: DEFAULT_STREAM_LAMBDA },
            ],
            lambda_sweep: DEFAULT_LAMBDA_SWEEP.to_vec(),
            n_ensemble: 10_000,
            t_final: kind.default_t_end(),
            dt: 1e-3,
            dt_slice: 2e-2,
            grid: kind.default_shape(),
            seed: 7,
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::InvalidArgument(msg);
        if !(self.t_final > 0.0) {
            return Err(bad(format!("t_final = {} must be > 0", self.t_final)));
        }
        if !(self.dt > 0.0) || self.dt > self.t_final {
            return Err(bad(format!("dt = {} must be in (0, t_final]", self.dt)));
        }
        if self.dt_slice < self.dt {
            return Err(bad(format!(
                "dt_slice = {} must be at least dt = {}",
                self.dt_slice, self.dt
            )));
        }
        if self.n_ensemble == 0 {
            return Err(bad("n_ensemble must be positive".into()));
        }
        if self.grid.0 < 8 || self.grid.1 < 8 {
            return Err(bad(format!("grid {}x{} too small (need >= 8)", self.grid.0, self.grid.1)));
        }
        if self.velocity_models.is_empty() {
            return Err(bad("velocity_models must not be empty".into()));
        }
        Ok(())
    }

    /// Slice-analysis checkpoint times: an even subdivision of
    /// `(0, t_final]` with spacing as close to `dt_slice` as divides
    /// exactly, so the last checkpoint lands on `t_final`.
    pub fn checkpoints(&self) -> Vec<f64> {
        let k = (self.t_final / self.dt_slice).ceil().max(1.0) as usize;
        let step = self.t_final / k as f64;
        (1..=k).map(|i| i as f64 * step).collect()
    }

    /// Canonical text form: every key, one section, sorted stable order.
    /// Parsing the snapshot reproduces the config exactly.
    pub fn snapshot(&self) -> String {
        let models: Vec<String> =
            self.velocity_models.iter().map(|m| m.label()).collect();
        let sweep: Vec<String> = self.lambda_sweep.iter().map(|l| l.to_string()).collect();
        format!(
            "[run]\n\
             scenario = {}\n\
             velocity_models = {}\n\
             lambda_sweep = {}\n\
             n_ensemble = {}\n\
             t_final = {}\n\
             dt = {}\n\
             dt_slice = {}\n\
             n1 = {}\n\
             n2 = {}\n\
             seed = {}\n\
             out_dir = {}\n",
            self.scenario.name(),
            models.join(", "),
            sweep.join(", "),
            self.n_ensemble,
            self.t_final,
            self.dt,
            self.dt_slice,
            self.grid.0,
            self.grid.1,
            self.seed,
            self.out_dir.display(),
        )
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::default_for(ScenarioKind::VortexOscillator)
    }
}

/// Parse a `NxM` grid specification such as `257x129`.
pub fn parse_grid_spec(s: &str) -> Result<(usize, usize)> {
    let bad = || {
        Error::InvalidArgument(format!("grid spec '{s}' is not of the form N1xN2 (e.g. 257x129)"))
    };
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let n1: usize = a.trim().parse().map_err(|_| bad())?;
    let n2: usize = b.trim().parse().map_err(|_| bad())?;
    Ok((n1, n2))
}

fn parse_lambda_list(line: usize, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<f64>().map_err(|_| Error::Config {
                line,
                msg: format!("'{tok}' in lambda_sweep is not a number"),
            })
        })
        .collect()
}

fn parse_model_list(line: usize, value: &str) -> Result<Vec<VelocityModel>> {
    value
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            if tok == "stream" {
                return Ok(VelocityModel::StreamShift { lambda: DEFAULT_STREAM_LAMBDA });
            }
            VelocityModel::parse(tok)
                .map_err(|e| Error::Config { line, msg: e.to_string() })
        })
        .collect()
}

/// Parse configuration text. Sections (`[name]`) are organizational only;
/// keys form a single flat namespace, each may appear once, and unknown
/// keys are rejected by name. `#` and `;` start comments.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut scenario = ScenarioKind::VortexOscillator;
    // scenario must be resolved before its defaults apply, so record raw
    // key-value pairs first
    let mut pairs: Vec<(usize, String, String)> = Vec::new();
    let mut seen: Vec<String> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find(['#', ';']) {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        if stripped.starts_with('[') {
            if !stripped.ends_with(']') || stripped.len() < 3 {
                return Err(Error::Config {
                    line,
                    msg: format!("malformed section header '{stripped}'"),
                });
            }
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| Error::Config {
            line,
            msg: format!("expected 'key = value', found '{stripped}'"),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config { line, msg: "empty key".into() });
        }
        if seen.contains(&key) {
            return Err(Error::Config { line, msg: format!("duplicate key '{key}'") });
        }
        seen.push(key.clone());
        if key == "scenario" {
            scenario = ScenarioKind::from_name(&value)
                .map_err(|e| Error::Config { line, msg: e.to_string() })?;
        }
        pairs.push((line, key, value));
    }

    let mut cfg = ExperimentConfig::default_for(scenario);
    for (line, key, value) in pairs {
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|_| Error::Config {
                line,
                msg: format!("'{v}' is not a number for key '{key}'"),
            })
        };
        let count = |v: &str| -> Result<usize> {
            v.parse::<usize>().map_err(|_| Error::Config {
                line,
                msg: format!("'{v}' is not a non-negative integer for key '{key}'"),
            })
        };
        match key.as_str() {
            "scenario" => {} // already resolved
            "velocity_models" => cfg.velocity_models = parse_model_list(line, &value)?,
            "lambda_sweep" => cfg.lambda_sweep = parse_lambda_list(line, &value)?,
            "n_ensemble" => cfg.n_ensemble = count(&value)?,
            "t_final" => cfg.t_final = num(&value)?,
            "dt" => cfg.dt = num(&value)?,
            "dt_slice" => cfg.dt_slice = num(&value)?,
            "n1" => cfg.grid.0 = count(&value)?,
            "n2" => cfg.grid.1 = count(&value)?,
            "grid" => {
                cfg.grid = parse_grid_spec(&value)
                    .map_err(|e| Error::Config { line, msg: e.to_string() })?
            }
            "seed" => {
                cfg.seed = value.parse::<u64>().map_err(|_| Error::Config {
                    line,
                    msg: format!("'{value}' is not a u64 seed"),
                })?
            }
            "out_dir" => cfg.out_dir = PathBuf::from(&value),
            other => {
                return Err(Error::Config { line, msg: format!("unknown key '{other}'") });
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Read and parse a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}
