pub mod cluster;
pub mod eval;
pub mod geometry;
pub mod ground;
pub mod io;
pub mod output;
pub mod packet;
pub mod params;
pub mod pipeline;
pub mod synth;

pub use geometry::{to_cartesian, GroundLabel, SphericalPoint};
pub use params::{ParamError, SegParams};
