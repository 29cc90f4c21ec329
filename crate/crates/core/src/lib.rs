pub mod agent;
pub mod bench;
pub mod par;
pub mod pyramid;
pub mod raster;
pub mod synth;
pub mod tissue;
pub mod viewport;
