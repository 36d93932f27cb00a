//! Broken λ-ray tracing, Jacobi fields, ray transforms and Pestov-identity
//! checks on conformal planar surfaces with a reflecting obstacle.

pub mod expr;
pub mod geometry;
pub mod lambda;
pub mod dynamics;
pub mod quadrature;
pub mod jacobi;
pub mod transform;
pub mod pestov;
pub mod admissibility;
pub mod inversion;
pub mod config;
pub mod output;
pub mod cli;
pub mod suite;
