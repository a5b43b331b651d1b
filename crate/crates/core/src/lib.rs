pub mod centerline;
pub mod geo;
pub mod raster;
pub mod roadmodel;
pub mod tiles;
pub mod synth;
pub mod classify;
pub mod segment;
pub mod link;
pub mod eval;
pub mod pipeline;
