//! Steady incompressible Navier-Stokes on a fixed background mesh with an
//! embedded, geometrically parametrized obstacle, plus an offline/online
//! POD-Galerkin reduction pipeline.
//!
//! The full-order solver never remeshes: the obstacle is a level set over the
//! background triangulation, the equations are solved on the surrogate domain
//! of uncut fluid elements, and Dirichlet conditions are enforced weakly on
//! the surrogate boundary with a Taylor-shifted Nitsche formulation. Newton
//! iterates collected over a training set of geometries feed a POD
//! compression whose bases drive dense reduced solves for new geometries.

pub mod config;
pub mod error;
pub mod exec;
pub mod fem;
pub mod io;
pub mod levelset;
pub mod mesh;
pub mod pipeline;
pub mod pod;
pub mod poisson;
pub mod rom;
pub mod solver;
pub mod sparse;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
