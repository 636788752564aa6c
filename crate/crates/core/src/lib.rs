//! Lazy random walks on a family of trees built from a path, one huge binary
//! tree at the origin and smaller binary trees hung along the path.
//!
//! The crate constructs the trees with implicit adjacency, computes exact
//! mixing profiles, hitting-time moments and spectral quantities (using exact
//! lumping and symmetry sectors where the full state space is too large), and
//! runs seeded Monte Carlo simulations of the walk and of a coupling.

pub mod chain;
pub mod error;
pub mod graph;
pub mod hitting;
pub mod linalg;
pub mod lumping;
pub mod mixing;
pub mod montecarlo;
pub mod spectral;
pub mod stats;
pub mod topology;
pub mod verify;

mod sectors;

pub use chain::{ChainOperator, ProbVector, TestFunction};
pub use error::{Error, Result};
pub use graph::{Adjacency, EdgeListGraph};
pub use topology::{
    build_family_tree, build_family_tree_with, BuildOptions, LevelSchedule, MassExponent, RegionId, RegionKind,
    TreeFamilySpec, TreeGraph, TreeMode, VertexRef,
};

/// Version string written into every output manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
