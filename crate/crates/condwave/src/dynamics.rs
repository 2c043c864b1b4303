//! Trajectories guided by a stationary state: the standard velocity law,
//! two modified families that preserve the |psi|^2 distribution, ensemble
//! transport, and a Newton integrator for classical comparison orbits.
//!
//! Velocity laws. With `psi = R exp(i S / hbar)`, `rho = R^2` and the
//! probability current `j_a = rho v_a`, the guiding law is
//! `v_a = (hbar / m_a) Im(d_a psi / psi)`. Two families of alternatives
//! transport `rho` equally well for a stationary state:
//! * scaled: `u = (1 + lambda) v` — allowed because `div(rho v) = 0` when
//!   `rho` is time-independent; `lambda = -1` freezes every trajectory;
//! * stream-shifted: `u_a = v_a + lambda eps_ab (d_b rho) / rho` — adds a
//!   divergence-free current built from the stream function `rho` itself,
//!   valid whether or not the state is stationary.

use crate::field::{
    gradient, interpolate_bilinear, interpolate_masked, node_mask, dilate_mask, MaskedReal2D,
    ComplexField2D, RealField2D, NODE_EPS_REL,
};
use crate::grid::Grid2D;
use crate::stationary::Masses;
use crate::{Error, Result, HBAR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// Velocity models

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VelocityModel {
    /// The standard guiding law `v_a = (hbar/m_a) Im(d_a psi / psi)`.
    Bohmian,
    /// `u = (1 + lambda) v`; preserves |psi|^2 only for stationary states.
    Scaled { lambda: f64 },
    /// `u_a = v_a + lambda eps_ab d_b(rho) / rho`; preserves |psi|^2 always.
    StreamShift { lambda: f64 },
}

impl VelocityModel {
    /// Parse `bohmian`, `scaled=<lambda>`, or `stream=<lambda>`.
    pub fn parse(s: &str) -> Result<VelocityModel> {
        if s == "bohmian" {
            return Ok(VelocityModel::Bohmian);
        }
        let bad = || {
            Error::InvalidArgument(format!(
                "unknown velocity model '{s}' (expected bohmian, scaled=<lambda>, \
                 or stream=<lambda>)"
            ))
        };
        let (name, val) = s.split_once('=').ok_or_else(bad)?;
        let lambda: f64 = val.parse().map_err(|_| bad())?;
        if !lambda.is_finite() {
            return Err(bad());
        }
        match name {
            "scaled" => Ok(VelocityModel::Scaled { lambda }),
            "stream" => Ok(VelocityModel::StreamShift { lambda }),
            _ => Err(bad()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            VelocityModel::Bohmian => "bohmian".into(),
            VelocityModel::Scaled { lambda } => format!("scaled={lambda}"),
            VelocityModel::StreamShift { lambda } => format!("stream={lambda}"),
        }
    }
}

impl std::fmt::Display for VelocityModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

// ---------------------------------------------------------------------------
// Grid-backed velocity fields

/// Everything the velocity laws need, tabulated once from the state.
#[derive(Clone, Debug)]
pub struct StateFields {
    pub grid: Grid2D,
    pub masses: Masses,
    pub psi: ComplexField2D,
    pub rho: RealField2D,
    /// Guiding velocity components, masked near nodes.
    pub v: [MaskedReal2D; 2],
    /// Stream-shift components `(d2 rho / rho, -d1 rho / rho)`, same mask.
    pub stream: [MaskedReal2D; 2],
    pub amp_max: f64,
}

impl StateFields {
    pub fn new(psi: &ComplexField2D, masses: Masses) -> Result<StateFields> {
        let grid = psi.grid;
        let (mask0, amp_max) = node_mask(psi, NODE_EPS_REL)?;
        // derivative stencils reach one cell; pad the node mask accordingly
        let mask = dilate_mask(&mask0, &grid, 2);
        let rho = RealField2D::new(grid, psi.values.mapv(|v| v.norm_sqr()))?;

        let dpsi = [gradient(psi, 0), gradient(psi, 1)];
        let mut v = Vec::with_capacity(2);
        for axis in 0..2 {
            let mut vals = ndarray::Array2::zeros(grid.shape());
            for ((i1, i2), out) in vals.indexed_iter_mut() {
                let den = rho.values[[i1, i2]];
                if mask[[i1, i2]] || den == 0.0 {
                    continue;
                }
                let cur = (psi.values[[i1, i2]].conj() * dpsi[axis].values[[i1, i2]]).im;
                *out = HBAR * cur / (masses.axis(axis) * den);
            }
            v.push(MaskedReal2D {
                field: RealField2D::new(grid, vals)?,
                mask: mask.clone(),
            });
        }

        let drho = [gradient(&rho, 0), gradient(&rho, 1)];
        let mut stream = Vec::with_capacity(2);
        for axis in 0..2 {
            // eps_ab d_b rho: axis 1 gets +d2 rho, axis 2 gets -d1 rho
            let src = &drho[1 - axis];
            let sign = if axis == 0 { 1.0 } else { -1.0 };
            let mut vals = ndarray::Array2::zeros(grid.shape());
            for ((i1, i2), out) in vals.indexed_iter_mut() {
                let den = rho.values[[i1, i2]];
                if mask[[i1, i2]] || den == 0.0 {
                    continue;
                }
                *out = sign * src.values[[i1, i2]] / den;
            }
            stream.push(MaskedReal2D {
                field: RealField2D::new(grid, vals)?,
                mask: mask.clone(),
            });
        }

        let [v1, v2] = <[MaskedReal2D; 2]>::try_from(v).expect("two components");
        let [s1, s2] = <[MaskedReal2D; 2]>::try_from(stream).expect("two components");
        Ok(StateFields {
            grid,
            masses,
            psi: psi.clone(),
            rho,
            v: [v1, v2],
            stream: [s1, s2],
            amp_max,
        })
    }

    fn component(&self, axis: usize, model: VelocityModel, x: [f64; 2]) -> Result<f64> {
        let base = interpolate_masked(&self.v[axis], x);
        let val = match model {
            VelocityModel::Bohmian => base?,
            VelocityModel::Scaled { lambda } => (1.0 + lambda) * base?,
            VelocityModel::StreamShift { lambda } => {
                base? + lambda * interpolate_masked(&self.stream[axis], x)?
            }
        };
        Ok(val)
    }

    /// Evaluate the chosen law at a point, translating mask hits into a
    /// node-proximity error with physical context.
    pub fn velocity(&self, model: VelocityModel, x: [f64; 2]) -> Result<[f64; 2]> {
        let eval = |axis: usize| {
            self.component(axis, model, x).map_err(|e| match e {
                Error::Masked(..) => {
                    let amp = interpolate_bilinear(&self.rho, x)
                        .map(|r| r.max(0.0).sqrt())
                        .unwrap_or(0.0);
                    Error::NodeProximity {
                        x1: x[0],
                        x2: x[1],
                        amp,
                        floor: NODE_EPS_REL * self.amp_max,
                    }
                }
                other => other,
            })
        };
        Ok([eval(0)?, eval(1)?])
    }

    /// Max of `|div(rho u)| / (max|rho u| / cell)` over unmasked interior
    /// points: how well the law transports the stationary density.
    pub fn divergence_metric(&self, model: VelocityModel) -> f64 {
        let (n1, n2) = self.grid.shape();
        let mut flux1 = ndarray::Array2::zeros((n1, n2));
        let mut flux2 = ndarray::Array2::zeros((n1, n2));
        let mut mask = self.v[0].mask.clone();
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                if mask[[i1, i2]] {
                    continue;
                }
                let x = [self.grid.axis(0).coord(i1), self.grid.axis(1).coord(i2)];
                let rho = self.rho.values[[i1, i2]];
                let u = [
                    self.component(0, model, x).unwrap_or(f64::NAN),
                    self.component(1, model, x).unwrap_or(f64::NAN),
                ];
                if u[0].is_nan() || u[1].is_nan() {
                    mask[[i1, i2]] = true;
                    continue;
                }
                flux1[[i1, i2]] = rho * u[0];
                flux2[[i1, i2]] = rho * u[1];
            }
        }
        let f1 = MaskedReal2D { field: RealField2D { grid: self.grid, values: flux1 }, mask: mask.clone() };
        let f2 = MaskedReal2D { field: RealField2D { grid: self.grid, values: flux2 }, mask };
        let d1 = f1.derivative(0);
        let d2 = f2.derivative(1);
        let scale = f1
            .field
            .values
            .iter()
            .chain(f2.field.values.iter())
            .fold(0.0_f64, |m, &v| m.max(v.abs()))
            / self.grid.axis(0).spacing().min(self.grid.axis(1).spacing());
        let mut worst = 0.0_f64;
        for ((i1, i2), &m) in d1.mask.indexed_iter() {
            if m || d2.mask[[i1, i2]] {
                continue;
            }
            worst = worst.max((d1.field.values[[i1, i2]] + d2.field.values[[i1, i2]]).abs());
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }
}

// ---------------------------------------------------------------------------
// Flows

/// A first-order velocity field that trajectories follow. Positions live in
/// the covering space: periodic axes are wrapped inside the evaluation, so
/// stored trajectories stay continuous (no seam jumps).
pub trait Flow {
    fn velocity(&self, t: f64, x: [f64; 2]) -> Result<[f64; 2]>;
}

pub struct GridFlow<'a> {
    pub fields: &'a StateFields,
    pub model: VelocityModel,
}

impl Flow for GridFlow<'_> {
    fn velocity(&self, _t: f64, x: [f64; 2]) -> Result<[f64; 2]> {
        self.fields.velocity(self.model, x)
    }
}

/// Closed-form velocity field, for oracles and cross-checks.
pub struct AnalyticFlow<F: Fn(f64, [f64; 2]) -> Option<[f64; 2]>> {
    pub f: F,
}

impl<F: Fn(f64, [f64; 2]) -> Option<[f64; 2]>> Flow for AnalyticFlow<F> {
    fn velocity(&self, t: f64, x: [f64; 2]) -> Result<[f64; 2]> {
        (self.f)(t, x).ok_or(Error::NodeProximity { x1: x[0], x2: x[1], amp: 0.0, floor: 0.0 })
    }
}

// ---------------------------------------------------------------------------
// Trajectory integration

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub positions: Vec<[f64; 2]>,
    /// Flow velocity at each stored point (also the Hermite slopes).
    pub velocities: Vec<[f64; 2]>,
    pub min_step: f64,
    pub step_halvings: usize,
}

impl Trajectory {
    pub fn start(&self) -> [f64; 2] {
        self.positions[0]
    }

    pub fn end(&self) -> [f64; 2] {
        *self.positions.last().expect("non-empty trajectory")
    }

    fn locate(&self, t: f64) -> Result<usize> {
        let (t0, t1) = (self.times[0], *self.times.last().unwrap());
        let slack = 1e-9 * (1.0 + t1.abs() - t0.abs().min(0.0));
        if t < t0 - slack || t > t1 + slack {
            return Err(Error::TrajectoryRange { t, t0, t1 });
        }
        let mut lo = 0;
        let mut hi = self.times.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.times[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    }

    /// Cubic-Hermite interpolation of the position at time `t` (the stored
    /// velocities provide the slopes, so accuracy matches the integrator).
    pub fn position(&self, t: f64) -> Result<[f64; 2]> {
        let i = self.locate(t)?;
        let (ta, tb) = (self.times[i], self.times[i + 1]);
        let h = tb - ta;
        let u = ((t - ta) / h).clamp(0.0, 1.0);
        let (h00, h10) = (2.0 * u.powi(3) - 3.0 * u * u + 1.0, u.powi(3) - 2.0 * u * u + u);
        let (h01, h11) = (-2.0 * u.powi(3) + 3.0 * u * u, u.powi(3) - u * u);
        let mut out = [0.0; 2];
        for a in 0..2 {
            out[a] = h00 * self.positions[i][a]
                + h10 * h * self.velocities[i][a]
                + h01 * self.positions[i + 1][a]
                + h11 * h * self.velocities[i + 1][a];
        }
        Ok(out)
    }

    /// Flow velocity at time `t`, Hermite-interpolated between stored
    /// samples (derivative of [`Trajectory::position`]).
    pub fn velocity(&self, t: f64) -> Result<[f64; 2]> {
        let i = self.locate(t)?;
        let (ta, tb) = (self.times[i], self.times[i + 1]);
        let h = tb - ta;
        let u = ((t - ta) / h).clamp(0.0, 1.0);
        let (d00, d10) = ((6.0 * u * u - 6.0 * u) / h, 3.0 * u * u - 4.0 * u + 1.0);
        let (d01, d11) = ((6.0 * u - 6.0 * u * u) / h, 3.0 * u * u - 2.0 * u);
        let mut out = [0.0; 2];
        for a in 0..2 {
            out[a] = d00 * self.positions[i][a]
                + d10 * self.velocities[i][a]
                + d01 * self.positions[i + 1][a]
                + d11 * self.velocities[i + 1][a];
        }
        Ok(out)
    }
}

fn rk4_step<F: Flow + ?Sized>(flow: &F, t: f64, x: [f64; 2], dt: f64) -> Result<([f64; 2], [f64; 2])> {
    let k1 = flow.velocity(t, x)?;
    let k2 = flow.velocity(t + 0.5 * dt, [x[0] + 0.5 * dt * k1[0], x[1] + 0.5 * dt * k1[1]])?;
    let k3 = flow.velocity(t + 0.5 * dt, [x[0] + 0.5 * dt * k2[0], x[1] + 0.5 * dt * k2[1]])?;
    let k4 = flow.velocity(t + dt, [x[0] + dt * k3[0], x[1] + dt * k3[1]])?;
    let next = [
        x[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ];
    Ok((next, k1))
}

/// Classical RK4 with node-triggered step halving: when a stage evaluation
/// lands in a masked node region (or just off the box), the step is halved
/// (up to `max_halvings`) and retried; after two clean steps the size is
/// doubled back toward `dt`.
pub fn integrate_flow<F: Flow + ?Sized>(
    flow: &F,
    x0: [f64; 2],
    t0: f64,
    t1: f64,
    dt: f64,
    max_halvings: u32,
) -> Result<Trajectory> {
    if !(dt > 0.0) || !t1.is_finite() || !t0.is_finite() || t1 <= t0 {
        return Err(Error::InvalidArgument(format!(
            "bad integration window [{t0}, {t1}] with step {dt}"
        )));
    }
    let mut traj = Trajectory {
        times: vec![t0],
        positions: vec![x0],
        velocities: vec![flow.velocity(t0, x0)?],
        min_step: dt,
        step_halvings: 0,
    };
    let mut t = t0;
    let mut x = x0;
    let mut level: u32 = 0;
    let mut clean_streak = 0;
    while t < t1 - 1e-12 * (t1 - t0) {
        let step = (dt / f64::powi(2.0, level as i32)).min(t1 - t);
        match rk4_step(flow, t, x, step) {
            Ok((next, _)) => {
                t += step;
                x = next;
                traj.times.push(t);
                traj.positions.push(x);
                traj.velocities.push(flow.velocity(t, x)?);
                traj.min_step = traj.min_step.min(step);
                clean_streak += 1;
                if level > 0 && clean_streak >= 2 {
                    level -= 1;
                    clean_streak = 0;
                }
            }
            Err(e) => {
                if level >= max_halvings {
                    return Err(e);
                }
                level += 1;
                traj.step_halvings += 1;
                clean_streak = 0;
            }
        }
    }
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Newton (second-order) integration for classical comparison orbits

#[derive(Clone, Debug)]
pub struct NewtonTrajectory {
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    pub momenta: Vec<f64>,
}

/// RK4 on `(x, p)` with `dx/dt = p/m`, `dp/dt = force(t, x)`.
pub fn integrate_newton<F>(
    force: F,
    mass: f64,
    x0: f64,
    p0: f64,
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<NewtonTrajectory>
where
    F: Fn(f64, f64) -> Result<f64>,
{
    if !(dt > 0.0) || t1 <= t0 {
        return Err(Error::InvalidArgument(format!(
            "bad integration window [{t0}, {t1}] with step {dt}"
        )));
    }
    let mut out = NewtonTrajectory { times: vec![t0], positions: vec![x0], momenta: vec![p0] };
    let (mut t, mut x, mut p) = (t0, x0, p0);
    while t < t1 - 1e-12 * (t1 - t0) {
        let h = dt.min(t1 - t);
        let f = |t: f64, x: f64, p: f64| -> Result<(f64, f64)> { Ok((p / mass, force(t, x)?)) };
        let (k1x, k1p) = f(t, x, p)?;
        let (k2x, k2p) = f(t + 0.5 * h, x + 0.5 * h * k1x, p + 0.5 * h * k1p)?;
        let (k3x, k3p) = f(t + 0.5 * h, x + 0.5 * h * k2x, p + 0.5 * h * k2p)?;
        let (k4x, k4p) = f(t + h, x + h * k3x, p + h * k3p)?;
        x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        t += h;
        out.times.push(t);
        out.positions.push(x);
        out.momenta.push(p);
    }
    Ok(out)
}

/// RK4 for the full two-coordinate classical system
/// `dx_a/dt = p_a/m_a`, `dp_a/dt = force_a(t, x)`. The result is packaged
/// as a [`Trajectory`] (velocities `p_a/m_a` provide the Hermite slopes),
/// so classical orbits interpolate exactly like flow trajectories and can
/// drive the same conditional-slice machinery.
pub fn integrate_newton2<F>(
    force: F,
    masses: Masses,
    x0: [f64; 2],
    p0: [f64; 2],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Trajectory>
where
    F: Fn(f64, [f64; 2]) -> Result<[f64; 2]>,
{
    if !(dt > 0.0) || t1 <= t0 {
        return Err(Error::InvalidArgument(format!(
            "bad integration window [{t0}, {t1}] with step {dt}"
        )));
    }
    let m = [masses.m1, masses.m2];
    let vel = |p: [f64; 2]| [p[0] / m[0], p[1] / m[1]];
    let mut out = Trajectory {
        times: vec![t0],
        positions: vec![x0],
        velocities: vec![vel(p0)],
        min_step: dt,
        step_halvings: 0,
    };
    let (mut t, mut x, mut p) = (t0, x0, p0);
    while t < t1 - 1e-12 * (t1 - t0) {
        let h = dt.min(t1 - t);
        let f = |t: f64, x: [f64; 2], p: [f64; 2]| -> Result<([f64; 2], [f64; 2])> {
            Ok((vel(p), force(t, x)?))
        };
        let add = |a: [f64; 2], s: f64, b: [f64; 2]| [a[0] + s * b[0], a[1] + s * b[1]];
        let (k1x, k1p) = f(t, x, p)?;
        let (k2x, k2p) = f(t + 0.5 * h, add(x, 0.5 * h, k1x), add(p, 0.5 * h, k1p))?;
        let (k3x, k3p) = f(t + 0.5 * h, add(x, 0.5 * h, k2x), add(p, 0.5 * h, k2p))?;
        let (k4x, k4p) = f(t + h, add(x, h, k3x), add(p, h, k3p))?;
        for a in 0..2 {
            x[a] += h / 6.0 * (k1x[a] + 2.0 * k2x[a] + 2.0 * k3x[a] + k4x[a]);
            p[a] += h / 6.0 * (k1p[a] + 2.0 * k2p[a] + 2.0 * k3p[a] + k4p[a]);
        }
        t += h;
        out.times.push(t);
        out.positions.push(x);
        out.velocities.push(vel(p));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ensembles

/// Draw `n` positions from the bilinear interpolant of `|psi|^2` by
/// rejection against the grid maximum. Each sample gets its own counter
/// stream of the generator, so results are independent of evaluation order
/// (and safe to parallelize).
pub fn sample_positions(psi: &ComplexField2D, n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    let rho = RealField2D::new(psi.grid, psi.values.mapv(|v| v.norm_sqr()))?;
    let rho_max = rho.values.iter().fold(0.0_f64, |m, &v| m.max(v));
    if rho_max <= 0.0 {
        return Err(Error::ZeroField);
    }
    let ax1 = psi.grid.axis(0);
    let ax2 = psi.grid.axis(1);
    let (lo1, hi1) = (ax1.min(), ax1.max());
    let (lo2, hi2) = (ax2.min(), ax2.max());

    (0..n)
        .into_par_iter()
        .map(|member| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(member as u64 + 1);
            for _ in 0..100_000 {
                let x = [rng.gen_range(lo1..hi1), rng.gen_range(lo2..hi2)];
                let r = interpolate_bilinear(&rho, x)?;
                if rng.gen_range(0.0..rho_max) < r {
                    return Ok(x);
                }
            }
            Err(Error::NonFinite("rejection sampling failed to accept a point"))
        })
        .collect()
}

/// Transport every ensemble member from `t0` to `t1`; order-preserving and
/// deterministic.
pub fn evolve_ensemble<F: Flow + Sync + ?Sized>(
    flow: &F,
    starts: &[[f64; 2]],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Vec<[f64; 2]>> {
    starts
        .par_iter()
        .map(|&x0| integrate_flow(flow, x0, t0, t1, dt, 14).map(|tr| tr.end()))
        .collect()
}
