//! Conditional wave function dynamics for a closed two-particle system in 1D.
//!
//! The system lives in a stationary state `psi(x1, x2)` of a two-particle
//! Hamiltonian. Particle positions follow a configurable velocity law (the
//! Bohmian guidance law or a divergence-free modification of it), and the
//! wave function of particle 1 conditioned on the trajectory of particle 2,
//! `psi_c(x1, t) = psi(x1, X2(t))`, is analyzed quantitatively:
//!
//! * an exact effective Schrodinger-type equation with a complex potential
//!   that `psi_c` obeys identically, used as a discretization-order check;
//! * the approximate one-particle Schrodinger equation with the classical
//!   time-dependent potential `V(x1, X2(t))` that emerges when particle 2
//!   behaves classically, with residuals quantifying the approximation;
//! * equivariance of ensembles under each velocity law;
//! * classicality diagnostics for the environment particle.
//!
//! The crate is organized as a library; the `examples/` directory is the
//! primary interface, one runnable example per capability:
//!
//! ```text
//! cargo run --release -p condwave --example scenario_tour
//! cargo run --release -p condwave --example vortex_trajectories
//! cargo run --release -p condwave --example equivariance_check
//! cargo run --release -p condwave --example conditional_slices
//! cargo run --release -p condwave --example exact_identity_refinement
//! cargo run --release -p condwave --example conditional_schrodinger
//! cargo run --release -p condwave --example velocity_model_comparison
//! cargo run --release -p condwave --example eigensolver_demo
//! cargo run --release -p condwave --example classicality_report
//! ```
//!
//! A thin `condwave` binary exposes the same pipelines as subcommands
//! (`scenarios`, `equivariance`, `classicality`, `compare`, `residuals`)
//! for scripted runs; see the README.

pub mod cli;
pub mod conditional;
pub mod config;
pub mod dynamics;
mod error;
pub mod experiments;
pub mod field;
pub mod grid;
pub mod report;
pub mod stationary;

pub use error::{Error, Result};

/// Reduced Planck constant. The crate works in natural units (`hbar = 1`);
/// every formula spells the constant out so the unit system is explicit.
pub const HBAR: f64 = 1.0;
