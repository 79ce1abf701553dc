//! Joint next-best-view selection and voxel reconstruction.

pub mod autodiff;
pub mod cli;
pub mod eval;
pub mod loss;
pub mod model;
pub mod render;
pub mod shapes;
pub mod train;
pub mod viewsphere;
pub mod voxelgrid;
