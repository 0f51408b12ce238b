//! Last-iterate dynamics of bilinear min-max games under bounded gradient errors.
//!
//! The crate simulates simultaneous gradient descent-ascent (SGA), the implicit update (IU),
//! predictive methods (PM), consensus optimization (CO) and optimistic mirror descent (OMD)
//! on games `θᵀCω`, perturbs them with gradient-error oracles of norm at most `α`, and checks
//! measured trajectories against closed-form contraction factors, absorption radii and
//! iteration bounds.

pub mod error;
pub mod game;
pub mod dynamics;
pub mod perturbation;
pub mod theory;
pub mod config;
pub mod harness;
pub mod verify;
pub mod cli;

pub use error::{Error, Result};
