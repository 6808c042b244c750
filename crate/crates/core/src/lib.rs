pub mod geometry;
pub mod occfield;
pub mod generator;
pub mod autodiff;
pub mod shadow;
pub mod optimizer;
pub mod eval;
pub mod dataio;
pub mod cli;
