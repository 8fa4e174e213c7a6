//! Layered street-scene reconstruction: Gaussian splats for above-ground
//! content, a 2D signed-distance road surface, and an environment-mapped sky,
//! composited front to back and optimized end to end on the CPU.

pub mod compositor;
pub mod dataset;
pub mod geometry;
pub mod img;
pub mod io;
pub mod metrics;
pub mod pseudolidar;
pub mod roadfield;
pub mod scene;
pub mod sky;
pub mod splat;
pub mod synthbench;
pub mod trainer;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
