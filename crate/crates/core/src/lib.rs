//! Interior-point solver for AC optimal power flow and security-constrained
//! optimal power flow.
//!
//! The crate is organised bottom-up: [`grid_model`] parses cases and builds
//! admittance matrices, [`powerflow`] evaluates mismatches and solves the
//! power flow, [`opf_problems`] turns a grid into a nonlinear program,
//! [`kkt_linalg`] factorizes the Newton systems, [`ipm_core`] drives the
//! filter line-search interior-point method and [`reduced_space`] solves the
//! problem over the controls only.

pub mod grid_model;
pub mod powerflow;
pub mod kkt_linalg;
pub mod opf_problems;
pub mod reduced_space;
pub mod ipm_core;
