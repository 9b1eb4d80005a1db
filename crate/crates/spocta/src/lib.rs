//! Functional model of an octree-indexed sparse 3D convolution engine:
//! map search over 16^3 blocks with banked octree tables, sparsity-aware
//! gather/matmul/scatter execution, a weight-cache energy model, and a
//! cycle-approximate two-core pipeline simulator.

pub mod driver;
pub mod exec;
pub mod formats;
pub mod gen;
pub mod mapsearch;
pub mod mem;
pub mod octree;
pub mod oracle;
pub mod sim;
pub mod types;
