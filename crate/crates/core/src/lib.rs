//! Mean curvature flow of graphs of maps between constant-curvature model
//! spaces, with monitors for the length-decreasing property.

pub mod equivariant;
pub mod config;
pub mod error;
pub mod field;
pub mod flow;
pub mod frames;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod manifold;
pub mod monitor;

pub use error::{ConfigViolation, Error, Result};
pub use field::{InitialMap, MapField};
pub use grid::{build_grid, DomainGrid};
pub use manifold::{check_hypotheses, ChartPoint, HypothesisCheck, ManifoldKind, ModelManifold};
