//! Point-cloud place recognition on sparse voxel grids.
//!
//! The numeric core is generic over [`Scalar`] (implemented for `f32` and
//! `f64`); the aliases at the bottom of this file fix it to `f64`.

pub mod aggregation;
pub mod backbone;
pub mod bench;
pub mod config;
pub mod dataio;
pub mod diff;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod suite;
pub mod tensor;
pub mod training;
pub mod transformer;
pub mod voxel;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use voxel::{Coord, KernelMap, PointCloud};

pub type Real = f64;
pub type Tensor64 = tensor::Tensor<Real>;
pub type Graph64 = diff::Graph<Real>;
pub type ParamStore64 = params::ParamStore<Real>;
pub type SparseGrid64 = voxel::SparseGrid<Real>;
pub type Model64 = model::Model<Real>;
