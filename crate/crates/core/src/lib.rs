//! Differentiable distributed rainfall-runoff modelling with learnable
//! descriptors-to-parameters mappings.
//!
//! The crate is organised bottom-up: [`mesh`] holds the flow topology,
//! [`hydro`] the forward model, [`adjoint`] its exact reverse-mode gradient,
//! [`regio`] the regional mappings, [`cost`] the objective and validation
//! metrics, and [`optimize`] the calibration algorithms and the synthetic
//! twin harness. [`io`] reads and writes every file format.

pub mod adjoint;
pub mod cost;
pub mod hydro;
pub mod io;
pub mod mesh;
pub mod optimize;
pub mod regio;
